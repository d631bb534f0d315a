//! Accuracy of decoders trained on nested prefixes of one training set.

use moe_leak::cli::{default_train_config, size_sweep, Arch};
use moe_leak::decoders::{MlpDecoderConfig, SeqDecoderConfig};
use moe_leak::experiment::synth_dataset;
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let arch = match std::env::args().nth(1).as_deref() {
        Some("mlp") => Arch::Mlp,
        Some("seq") => Arch::Seq,
        _ => Arch::Lookup,
    };
    let victim = ModelConfig::desk();
    let train = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let heldout = synth_dataset(&victim, 2, 16 * 1024, 32)?;
    let cfg = default_train_config(arch, 1);
    let rows = size_sweep(
        &train,
        &heldout,
        &[1.0 / 16.0, 0.25, 1.0],
        arch,
        &MlpDecoderConfig::default(),
        &SeqDecoderConfig::default(),
        &cfg,
    )?;
    println!("tokens,top1,top5,top10");
    for (tokens, r) in rows {
        println!("{tokens},{:.2},{:.2},{:.2}", r.top1, r.top5, r.top10);
    }
    Ok(())
}
