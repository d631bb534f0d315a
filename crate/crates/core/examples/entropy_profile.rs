//! Plug-in entropy of each layer's routing and MI between layer pairs.

use moe_leak::experiment::synth_dataset;
use moe_leak::infolab::{entropy_csv, layer_profile, mi_csv, mi_heatmap, selection_entropy_bound};
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let victim = ModelConfig::desk();
    let ds = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let (profile, sum) = layer_profile(&ds)?;
    print!("{}", entropy_csv(&profile));
    println!(
        "sum {sum:.3} bits; per-layer ceiling {:.3} bits",
        selection_entropy_bound(victim.experts, victim.top_k)?
    );
    print!("{}", mi_csv(&mi_heatmap(&ds)?));
    Ok(())
}
