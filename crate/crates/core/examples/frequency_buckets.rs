//! Held-out accuracy as a function of how often a byte appeared in training.

use moe_leak::decoders::{freq_bucket_accuracy, frequency_deciles, train_lookup, DecoderModel};
use moe_leak::experiment::synth_dataset;
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let victim = ModelConfig::desk();
    let train = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let heldout = synth_dataset(&victim, 2, 16 * 1024, 32)?;
    let decoder = DecoderModel::Lookup(train_lookup(&train)?);
    let counts = train.token_counts();
    println!("log10_lo,log10_hi,samples,top1,low_confidence");
    for b in freq_bucket_accuracy(&decoder, &heldout, &counts, 0.14)? {
        println!("{:.2},{:.2},{},{:.2},{}", b.log10_lo, b.log10_hi, b.samples, b.top1, b.low_confidence);
    }
    for d in frequency_deciles(&decoder, &heldout, &counts)? {
        println!("decile {} ({} types, {} samples): top-1 {:.2}%", d.decile, d.token_types, d.samples, d.top1);
    }
    Ok(())
}
