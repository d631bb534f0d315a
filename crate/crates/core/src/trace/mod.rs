//! Routing traces: the attacker's observed signal.

mod dataset;
mod format;

pub use dataset::{generate_dataset, DatasetManifest, TraceDataset, TraceRecord};
pub use format::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};

/// Largest expert count representable with one byte per index.
pub const MAX_EXPERTS: usize = 256;

/// Sorted set of distinct expert indices selected for one token at one layer.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExpertSet(Vec<u8>);

impl ExpertSet {
    /// Builds a set from arbitrary-order indices, rejecting duplicates and
    /// indices `>= experts`.
    pub fn new(indices: &[usize], experts: usize) -> Result<Self> {
        if experts == 0 || experts > MAX_EXPERTS {
            bail!(Argument, "expert count {experts} outside 1..={MAX_EXPERTS}");
        }
        let mut v = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= experts {
                bail!(Input, "expert index {i} >= {experts}");
            }
            v.push(i as u8);
        }
        v.sort_unstable();
        if v.windows(2).any(|w| w[0] == w[1]) {
            bail!(Input, "duplicate expert index in {indices:?}");
        }
        Ok(Self(v))
    }

    /// Validates an already-encoded, strictly ascending cell.
    pub fn from_sorted(cell: &[u8], experts: usize) -> Result<Self> {
        validate_cell(cell, experts)?;
        Ok(Self(cell.to_vec()))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, expert: usize) -> bool {
        expert < MAX_EXPERTS && self.0.binary_search(&(expert as u8)).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&e| usize::from(e))
    }
}

impl fmt::Debug for ExpertSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(&self.0).finish()
    }
}

fn validate_cell(cell: &[u8], experts: usize) -> Result<()> {
    if cell.windows(2).any(|w| w[0] >= w[1]) {
        bail!(Input, "cell {cell:?} is not strictly ascending");
    }
    if let Some(&last) = cell.last() {
        if usize::from(last) >= experts {
            bail!(Input, "expert index {last} >= {experts}");
        }
    }
    Ok(())
}

/// Length-`experts` 0/1 vector with ones at the set's indices.
pub fn encode_multihot(set: &ExpertSet, experts: usize) -> Result<Vec<u8>> {
    let mut v = vec![0u8; experts];
    for e in set.iter() {
        if e >= experts {
            bail!(Input, "expert index {e} >= {experts}");
        }
        v[e] = 1;
    }
    Ok(v)
}

pub fn decode_multihot(bits: &[u8]) -> Result<ExpertSet> {
    let mut idx = Vec::new();
    for (i, &b) in bits.iter().enumerate() {
        match b {
            0 => {}
            1 => idx.push(i),
            other => bail!(Input, "multi-hot entry {other} at {i} is not 0/1"),
        }
    }
    ExpertSet::new(&idx, bits.len().max(1))
}

/// Expert selections over observed layers × positions, with `k` experts per
/// cell. Cells are stored layer-major: cell `(l, t)` for the `l`-th observed
/// layer and position `t`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RoutingTrace {
    experts: usize,
    top_k: usize,
    seq_len: usize,
    layers: Vec<usize>,
    cells: Vec<u8>,
}

impl fmt::Debug for RoutingTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoutingTrace")
            .field("experts", &self.experts)
            .field("top_k", &self.top_k)
            .field("seq_len", &self.seq_len)
            .field("layers", &self.layers)
            .finish_non_exhaustive()
    }
}

impl RoutingTrace {
    /// `layers` are the observed layer ids (strictly ascending); `cells` holds
    /// `layers.len() · seq_len · top_k` bytes.
    pub fn new(
        experts: usize,
        top_k: usize,
        seq_len: usize,
        layers: Vec<usize>,
        cells: Vec<u8>,
    ) -> Result<Self> {
        if experts == 0 || experts > MAX_EXPERTS {
            bail!(Argument, "expert count {experts} outside 1..={MAX_EXPERTS}");
        }
        if top_k == 0 || top_k > experts {
            bail!(Argument, "top-k {top_k} outside 1..={experts}");
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Argument, "observed layers {layers:?} not strictly ascending");
        }
        let expected = layers.len() * seq_len * top_k;
        if cells.len() != expected {
            bail!(Shape, "trace holds {} bytes, expected {expected}", cells.len());
        }
        for cell in cells.chunks_exact(top_k) {
            validate_cell(cell, experts)?;
        }
        Ok(Self {
            experts,
            top_k,
            seq_len,
            layers,
            cells,
        })
    }

    /// `sets[l][t]` is the selection at observed layer `layers[l]`.
    pub fn from_sets(
        experts: usize,
        top_k: usize,
        layers: Vec<usize>,
        sets: &[Vec<ExpertSet>],
    ) -> Result<Self> {
        if sets.len() != layers.len() {
            bail!(Shape, "{} layer rows for {} layers", sets.len(), layers.len());
        }
        let seq_len = sets.first().map_or(0, Vec::len);
        let mut cells = Vec::with_capacity(layers.len() * seq_len * top_k);
        for row in sets {
            if row.len() != seq_len {
                bail!(Shape, "ragged trace rows");
            }
            for s in row {
                if s.len() != top_k {
                    bail!(Input, "cell {s:?} does not hold {top_k} experts");
                }
                cells.extend_from_slice(s.as_slice());
            }
        }
        Self::new(experts, top_k, seq_len, layers, cells)
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Observed layer ids.
    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Cell at the `l`-th observed layer, position `t`.
    pub fn cell(&self, l: usize, t: usize) -> &[u8] {
        let off = (l * self.seq_len + t) * self.top_k;
        &self.cells[off..off + self.top_k]
    }

    /// Cell at original layer id `layer`, if observed.
    pub fn cell_at_layer(&self, layer: usize, t: usize) -> Option<&[u8]> {
        let l = self.layers.binary_search(&layer).ok()?;
        Some(self.cell(l, t))
    }

    pub fn set(&self, l: usize, t: usize) -> ExpertSet {
        ExpertSet(self.cell(l, t).to_vec())
    }

    /// All observed layers' selections for position `t`, concatenated.
    pub fn token_key(&self, t: usize) -> Vec<u8> {
        let mut key = Vec::with_capacity(self.layers.len() * self.top_k);
        for l in 0..self.layers.len() {
            key.extend_from_slice(self.cell(l, t));
        }
        key
    }

    pub fn multihot(&self) -> MultiHotTrace {
        let mut bits = vec![0u8; self.layers.len() * self.seq_len * self.experts];
        for l in 0..self.layers.len() {
            for t in 0..self.seq_len {
                let base = (l * self.seq_len + t) * self.experts;
                for &e in self.cell(l, t) {
                    bits[base + usize::from(e)] = 1;
                }
            }
        }
        MultiHotTrace {
            experts: self.experts,
            seq_len: self.seq_len,
            layers: self.layers.len(),
            bits,
        }
    }

    /// Keeps only the listed layers (a subset of the observed ones).
    pub fn mask_layers(&self, subset: &[usize]) -> Result<Self> {
        if subset.is_empty() {
            bail!(Argument, "layer subset must not be empty");
        }
        let mut keep = subset.to_vec();
        keep.sort_unstable();
        keep.dedup();
        let mut cells = Vec::with_capacity(keep.len() * self.seq_len * self.top_k);
        for &layer in &keep {
            let Ok(l) = self.layers.binary_search(&layer) else {
                bail!(Argument, "layer {layer} is not observed in this trace");
            };
            let off = l * self.seq_len * self.top_k;
            cells.extend_from_slice(&self.cells[off..off + self.seq_len * self.top_k]);
        }
        Ok(Self {
            layers: keep,
            cells,
            ..self.clone()
        })
    }

    /// Independently replaces each expert slot with probability `p` by an
    /// expert drawn uniformly from those not already in the cell.
    ///
    /// Slots are visited in ascending (layer, position, slot) order. Each
    /// original layer id draws from its own stream derived from `seed`, so
    /// corruption commutes with [`RoutingTrace::mask_layers`].
    pub fn corrupt(&self, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            bail!(Argument, "corruption rate {p} outside [0, 1]");
        }
        let mut out = self.clone();
        if p == 0.0 {
            return Ok(out);
        }
        let k = self.top_k;
        let mut outside = Vec::with_capacity(self.experts);
        for (l, &layer) in self.layers.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(layer_stream_seed(seed, layer));
            for t in 0..self.seq_len {
                let off = (l * self.seq_len + t) * k;
                let cell = &mut out.cells[off..off + k];
                for slot in 0..k {
                    if rng.random::<f64>() >= p {
                        continue;
                    }
                    outside.clear();
                    outside.extend((0..self.experts as u16).map(|e| e as u8).filter(|e| !cell.contains(e)));
                    if outside.is_empty() {
                        continue;
                    }
                    cell[slot] = outside[rng.random_range(0..outside.len())];
                }
                cell.sort_unstable();
            }
        }
        Ok(out)
    }
}

fn layer_stream_seed(seed: u64, layer: usize) -> u64 {
    // splitmix64 finalizer over (seed, layer)
    let mut z = seed ^ (layer as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per layer, per position: 0/1 vector of length `experts` with exactly `k`
/// ones. Stored as `[layer][position][expert]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHotTrace {
    pub experts: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub bits: Vec<u8>,
}

impl MultiHotTrace {
    pub fn vector(&self, l: usize, t: usize) -> &[u8] {
        let off = (l * self.seq_len + t) * self.experts;
        &self.bits[off..off + self.experts]
    }
}

impl TryFrom<&MultiHotTrace> for Vec<Vec<ExpertSet>> {
    type Error = Error;

    fn try_from(m: &MultiHotTrace) -> Result<Self> {
        (0..m.layers)
            .map(|l| (0..m.seq_len).map(|t| decode_multihot(m.vector(l, t))).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_trace() -> RoutingTrace {
        // 3 layers, T=4, n=8, k=2
        let sets: Vec<Vec<ExpertSet>> = (0..3)
            .map(|l| {
                (0..4)
                    .map(|t| ExpertSet::new(&[(l + t) % 8, (l * 3 + t + 1) % 8], 8).unwrap())
                    .collect()
            })
            .collect();
        RoutingTrace::from_sets(8, 2, vec![0, 1, 2], &sets).unwrap()
    }

    #[test]
    fn expert_set_invariants() {
        let s = ExpertSet::new(&[5, 1], 8).unwrap();
        assert_eq!(s.as_slice(), &[1, 5]);
        assert!(ExpertSet::new(&[1, 1], 8).is_err());
        assert!(ExpertSet::new(&[8], 8).is_err());
        assert!(ExpertSet::from_sorted(&[3, 2], 8).is_err());
    }

    #[test]
    fn multihot_examples() {
        let s = ExpertSet::new(&[1, 2], 8).unwrap();
        assert_eq!(encode_multihot(&s, 8).unwrap(), vec![0, 1, 1, 0, 0, 0, 0, 0]);
        let wide = ExpertSet::new(&[0, 9, 17, 31], 32).unwrap();
        let v = encode_multihot(&wide, 32).unwrap();
        assert_eq!(v.iter().filter(|&&b| b == 1).count(), 4);
        assert_eq!(decode_multihot(&v).unwrap(), wide);
        assert!(encode_multihot(&wide, 16).is_err());
        assert!(decode_multihot(&[0, 2]).is_err());
    }

    #[test]
    fn corrupt_zero_is_identity_and_seeded() {
        let tr = sample_trace();
        assert_eq!(tr.corrupt(0.0, 9).unwrap(), tr);
        assert_eq!(tr.corrupt(0.4, 9).unwrap(), tr.corrupt(0.4, 9).unwrap());
        assert!(tr.corrupt(1.5, 9).is_err());
        let full = tr.corrupt(1.0, 3).unwrap();
        for l in 0..3 {
            for t in 0..4 {
                ExpertSet::from_sorted(full.cell(l, t), 8).unwrap();
                // the last replaced slot's original expert can never survive
                // a full sweep; at k=2 the cell differs from the original
                assert_ne!(full.cell(l, t), tr.cell(l, t));
            }
        }
    }

    #[test]
    fn masking() {
        let tr = sample_trace();
        assert_eq!(tr.mask_layers(&[2, 0, 1]).unwrap(), tr);
        let one = tr.mask_layers(&[1]).unwrap();
        assert_eq!(one.num_layers(), 1);
        assert_eq!(one.cell(0, 3), tr.cell(1, 3));
        assert!(tr.mask_layers(&[]).is_err());
        assert!(one.mask_layers(&[0]).is_err());
    }

    #[test]
    fn masking_commutes_with_corruption() {
        let tr = sample_trace();
        let a = tr.corrupt(0.5, 77).unwrap().mask_layers(&[0, 2]).unwrap();
        let b = tr.mask_layers(&[0, 2]).unwrap().corrupt(0.5, 77).unwrap();
        assert_eq!(a, b);
    }
}
