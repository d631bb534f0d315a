//! Decodes held-out traces whose expert slots are randomly replaced.

use moe_leak::cli::{default_noise_grid, noise_sweep};
use moe_leak::decoders::{train_lookup, DecoderModel};
use moe_leak::experiment::{majority_baseline, synth_dataset};
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let victim = ModelConfig::desk();
    let train = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let heldout = synth_dataset(&victim, 2, 16 * 1024, 32)?;
    let decoder = DecoderModel::Lookup(train_lookup(&train)?);
    println!("p,top1,top5,top10");
    for (p, r) in noise_sweep(&decoder, &heldout, &default_noise_grid(), 11)? {
        println!("{p:.1},{:.2},{:.2},{:.2}", r.top1, r.top5, r.top10);
    }
    println!("majority baseline {:.2}%", majority_baseline(&train.token_counts(), &heldout));
    Ok(())
}
