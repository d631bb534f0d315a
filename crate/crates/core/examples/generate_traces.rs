//! Traces a synthetic corpus, writes the dataset file and reads it back.

use moe_leak::experiment::synth_dataset;
use moe_leak::moe::ModelConfig;
use moe_leak::trace::{read_dataset, write_dataset};

fn main() -> moe_leak::Result<()> {
    let tokens: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32 * 1024);
    let ds = synth_dataset(&ModelConfig::desk(), 1, tokens, 32)?;
    let path = std::env::temp_dir().join("generate_traces.mtrc");
    write_dataset(&ds, &path)?;
    let back = read_dataset(&path)?;
    assert_eq!(back, ds);
    println!("wrote {}", path.display());
    println!("{} records, {} tokens, digest {}", back.len(), back.num_tokens(), back.digest()?);
    println!("{}", serde_json::to_string_pretty(&back.manifest)?);
    Ok(())
}
