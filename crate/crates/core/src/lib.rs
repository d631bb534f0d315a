//! Reconstructing text from mixture-of-experts routing traces at desk scale.
//!
//! The crate bundles a seeded toy MoE transformer (the victim), the routing
//! trace data model and its binary file format, three attacker decoders
//! (lookup table, per-token MLP, sequence transformer), and plug-in
//! entropy / mutual-information estimators for routing leakage.

pub mod cli;
pub mod corpus;
pub mod decoders;
pub mod error;
pub mod experiment;
pub mod infolab;
pub mod moe;
pub mod numerics;
pub mod selftest;
pub mod trace;

pub use error::{Error, FormatError, Result};

use std::path::Path;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
