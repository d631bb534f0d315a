//! Memorises position-wise routing keys from one corpus and decodes another.

use moe_leak::decoders::{eval_topk, train_lookup, DecoderModel};
use moe_leak::experiment::{chance_percent, majority_baseline, synth_dataset};
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let victim = ModelConfig::desk();
    let train = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let heldout = synth_dataset(&victim, 2, 16 * 1024, 32)?;
    let lookup = train_lookup(&train)?;
    println!("{} distinct keys, fallback byte {}", lookup.table.len(), lookup.fallback());
    let report = eval_topk(&DecoderModel::Lookup(lookup), &heldout)?;
    println!("held-out top-1 {:.2}%  top-5 {:.2}%  top-10 {:.2}%", report.top1, report.top5, report.top10);
    println!(
        "chance {:.2}%, majority {:.2}%",
        chance_percent(victim.vocab),
        majority_baseline(&train.token_counts(), &heldout)
    );
    Ok(())
}
