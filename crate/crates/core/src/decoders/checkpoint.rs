//! Decoder checkpoint file, little-endian:
//!
//! ```text
//! "MDEC" | u16 version | u32 manifest_len | manifest JSON
//! parameters as f64, in manifest order
//! SHA-256 of everything above (32 bytes)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lookup::frequency_order;
use super::{
    DecoderModel, LookupDecoder, MlpDecoder, MlpDecoderConfig, SeqDecoder, SeqDecoderConfig,
    Signature, TrainConfig,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::FormatError;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MDEC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A trained decoder plus what it was trained on.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub decoder: DecoderModel,
    /// `None` for the lookup decoder, which has no training loop.
    pub train: Option<TrainConfig>,
    pub dataset_digest: String,
    pub train_token_counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: String,
    pub signature: Signature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp: Option<MlpDecoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<SeqDecoderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookup_table: Option<Vec<(Vec<u8>, u32)>>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub dataset_digest: String,
    pub train_token_counts: Vec<u64>,
    /// Parameter names and shapes, matching the payload order.
    pub params: Vec<(String, Vec<usize>)>,
}

fn params_of(d: &DecoderModel) -> Option<&ParamStore> {
    match d {
        DecoderModel::Lookup(_) => None,
        DecoderModel::Mlp(m) => Some(&m.params),
        DecoderModel::Seq(s) => Some(&s.params),
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let d = &ck.decoder;
    let store = params_of(d);
    let manifest = CheckpointManifest {
        arch: d.arch().to_string(),
        signature: d.signature().clone(),
        mlp: match d {
            DecoderModel::Mlp(m) => Some(m.config.clone()),
            _ => None,
        },
        seq: match d {
            DecoderModel::Seq(s) => Some(s.config.clone()),
            _ => None,
        },
        lookup_table: match d {
            DecoderModel::Lookup(l) => Some(l.table.iter().map(|(k, &v)| (k.clone(), v)).collect()),
            _ => None,
        },
        seed: ck.train.as_ref().map(|t| t.seed),
        epochs: ck.train.as_ref().map(|t| t.epochs),
        train: ck.train.clone(),
        dataset_digest: ck.dataset_digest.clone(),
        train_token_counts: ck.train_token_counts.clone(),
        params: store
            .map(|s| s.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect())
            .unwrap_or_default(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let len = u32::try_from(json.len()).map_err(|_| Error::Argument("manifest too large".into()))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    if let Some(s) = store {
        for (_, t) in s.iter() {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let fail = |needed: usize| FormatError::Truncated {
        needed,
        have: bytes.len(),
    };
    if bytes.len() < 10 {
        return Err(fail(10).into());
    }
    if bytes[..4] != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: bytes[..4].to_vec(),
        }
        .into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let mlen = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body_start = 10 + mlen;
    if bytes.len() < body_start + 32 {
        return Err(fail(body_start + 32).into());
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[10..body_start])
        .map_err(|e| FormatError::Manifest(e.to_string()))?;
    let values: usize = manifest.params.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let needed = body_start + values * 8 + 32;
    if bytes.len() < needed {
        return Err(fail(needed).into());
    }
    if bytes.len() > needed {
        return Err(FormatError::TrailingBytes(bytes.len() - needed).into());
    }
    let stored = &bytes[needed - 32..];
    let computed = Sha256::digest(&bytes[..needed - 32]);
    if stored != computed.as_slice() {
        return Err(FormatError::DigestMismatch {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        }
        .into());
    }

    let mut params = ParamStore::new();
    let mut at = body_start;
    for (name, shape) in &manifest.params {
        let n: usize = shape.iter().product();
        let data = bytes[at..at + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += n * 8;
        let t = Tensor::new(shape.clone(), data)?;
        if !t.is_finite() {
            return Err(FormatError::Invariant(format!("parameter {name} is not finite")).into());
        }
        params.insert(name.clone(), t)?;
    }
    let m = manifest;
    let invalid = |what: &str| FormatError::Manifest(format!("{} checkpoint without {what}", m.arch));
    let decoder = match m.arch.as_str() {
        "lookup" => DecoderModel::Lookup(LookupDecoder {
            signature: m.signature.clone(),
            table: m.lookup_table.clone().ok_or_else(|| invalid("table"))?.into_iter().collect(),
            frequency_order: frequency_order(&m.train_token_counts),
        }),
        "mlp" => DecoderModel::Mlp(MlpDecoder {
            config: m.mlp.clone().ok_or_else(|| invalid("config"))?,
            signature: m.signature.clone(),
            params,
        }),
        "seq" => DecoderModel::Seq(SeqDecoder {
            config: m.seq.clone().ok_or_else(|| invalid("config"))?,
            signature: m.signature.clone(),
            params,
        }),
        other => return Err(FormatError::Manifest(format!("unknown decoder arch {other:?}")).into()),
    };
    if m.train_token_counts.len() != m.signature.vocab {
        return Err(FormatError::Invariant("token counts do not cover the vocabulary".into()).into());
    }
    Ok(Checkpoint {
        decoder,
        train: m.train,
        dataset_digest: m.dataset_digest,
        train_token_counts: m.train_token_counts,
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    crate::write_atomic(path.as_ref(), &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
