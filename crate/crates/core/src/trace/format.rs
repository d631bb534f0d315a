//! Little-endian dataset file:
//!
//! ```text
//! "MTRC" | u16 version | u32 manifest_len | manifest JSON
//! record*: T × u32 token ids, then |observed|·T cells of k expert bytes (layer-major)
//! SHA-256 of everything above (32 bytes)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{RoutingTrace, TraceDataset, TraceRecord};
use super::dataset::DatasetManifest;
use crate::corpus::{source_id, ChunkOrigin, TokenChunk};
use crate::error::{Error, Result};
use crate::FormatError;

pub const DATASET_MAGIC: [u8; 4] = *b"MTRC";
pub const DATASET_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

pub fn encode_dataset(ds: &TraceDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let manifest = serde_json::to_vec(&ds.manifest)?;
    let m = &ds.manifest;
    let per_record = record_len(m);
    let mut out = Vec::with_capacity(10 + manifest.len() + per_record * ds.len() + DIGEST_LEN);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    let len = u32::try_from(manifest.len())
        .map_err(|_| Error::Argument("manifest exceeds 4 GiB".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    for r in &ds.records {
        for &t in &r.chunk.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out.extend_from_slice(r.trace.cells());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn record_len(m: &DatasetManifest) -> usize {
    m.seq_len * 4 + m.observed_layers.len() * m.seq_len * m.top_k
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8], FormatError> {
    let end = at.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(FormatError::Truncated {
        needed: at.saturating_add(n),
        have: bytes.len(),
    })?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Parses and fully validates a serialized dataset. No partial dataset is
/// ever returned.
pub fn decode_dataset(bytes: &[u8]) -> Result<TraceDataset> {
    let mut at = 0;
    let magic = take(bytes, &mut at, 4)?;
    if magic != DATASET_MAGIC {
        return Err(FormatError::BadMagic {
            expected: DATASET_MAGIC,
            found: magic.to_vec(),
        }
        .into());
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2)?.try_into().expect("2 bytes"));
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mlen = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
    let mbytes = take(bytes, &mut at, mlen)?;
    let manifest: DatasetManifest = serde_json::from_slice(mbytes)
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    if manifest.experts == 0 || manifest.experts > super::MAX_EXPERTS || manifest.top_k == 0 {
        return Err(FormatError::Manifest(format!(
            "unsupported n={} k={}",
            manifest.experts, manifest.top_k
        ))
        .into());
    }
    let body = record_len(&manifest)
        .checked_mul(manifest.record_count)
        .ok_or_else(|| FormatError::Manifest("record count overflows".into()))?;
    let needed = at + body + DIGEST_LEN;
    if bytes.len() < needed {
        return Err(FormatError::Truncated {
            needed,
            have: bytes.len(),
        }
        .into());
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes(bytes.len() - needed).into());
    }
    let payload_end = needed - DIGEST_LEN;
    let stored = &bytes[payload_end..];
    let computed = Sha256::digest(&bytes[..payload_end]);
    if stored != computed.as_slice() {
        return Err(FormatError::DigestMismatch {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        }
        .into());
    }

    let m = &manifest;
    let source = source_id(&m.corpus_id);
    let cells_len = m.observed_layers.len() * m.seq_len * m.top_k;
    let mut records = Vec::with_capacity(m.record_count);
    for i in 0..m.record_count {
        let tokens = take(bytes, &mut at, m.seq_len * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let cells = take(bytes, &mut at, cells_len)?.to_vec();
        let trace = RoutingTrace::new(m.experts, m.top_k, m.seq_len, m.observed_layers.clone(), cells)
            .map_err(|e| FormatError::Invariant(format!("record {i}: {e}")))?;
        records.push(TraceRecord {
            chunk: TokenChunk {
                tokens,
                origin: ChunkOrigin {
                    source,
                    offset: i * m.seq_len,
                },
            },
            trace,
        });
    }
    let ds = TraceDataset { manifest, records };
    ds.validate()?;
    Ok(ds)
}

/// Writes via a temporary sibling and rename, so readers never see a partial file.
pub fn write_dataset(ds: &TraceDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    crate::write_atomic(path, &bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<TraceDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ExpertSet;

    fn tiny() -> TraceDataset {
        let records = (0..3)
            .map(|i| {
                let sets: Vec<Vec<ExpertSet>> = (0..2)
                    .map(|l| {
                        (0..4)
                            .map(|t| ExpertSet::new(&[(i + l + t) % 5, 5 + (t % 3)], 8).unwrap())
                            .collect()
                    })
                    .collect();
                TraceRecord {
                    chunk: TokenChunk {
                        tokens: (0..4).map(|t| (i * 4 + t) as u32).collect(),
                        origin: ChunkOrigin {
                            source: source_id("tiny"),
                            offset: i * 4,
                        },
                    },
                    trace: RoutingTrace::from_sets(8, 2, vec![1, 3], &sets).unwrap(),
                }
            })
            .collect();
        TraceDataset {
            manifest: DatasetManifest {
                layers: 4,
                experts: 8,
                top_k: 2,
                seq_len: 4,
                vocab: 256,
                victim_seed: 7,
                corpus_id: "tiny".into(),
                record_count: 3,
                observed_layers: vec![1, 3],
            },
            records,
        }
    }

    #[test]
    fn roundtrip_and_layout() {
        let ds = tiny();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(&bytes[..4], b"MTRC");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(decode_dataset(&bytes).unwrap(), ds);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = encode_dataset(&tiny()).unwrap();
        let kind = |b: &[u8]| match decode_dataset(b) {
            Err(Error::Format(f)) => f,
            other => panic!("expected format error, got {other:?}"),
        };
        assert!(matches!(kind(&bytes[..bytes.len() - 1]), FormatError::Truncated { .. }));
        assert!(matches!(kind(&bytes[..3]), FormatError::Truncated { .. }));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(kind(&extra), FormatError::TrailingBytes(1)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(kind(&magic), FormatError::BadMagic { .. }));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(kind(&ver), FormatError::UnsupportedVersion(9)));
        let mut flip = bytes.clone();
        let n = flip.len();
        flip[n - 40] ^= 1;
        assert!(matches!(kind(&flip), FormatError::DigestMismatch { .. }));
    }

    #[test]
    fn invalid_cell_with_valid_digest_is_an_invariant_error() {
        let mut bytes = encode_dataset(&tiny()).unwrap();
        let n = bytes.len();
        // last cell of the last record: make it non-ascending
        bytes[n - 34] = 7;
        bytes[n - 33] = 1;
        let digest = Sha256::digest(&bytes[..n - 32]);
        bytes[n - 32..].copy_from_slice(&digest);
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::Format(FormatError::Invariant(_)))
        ));
    }
}
