//! Checks that a context-free victim routes every byte to a distinct trace,
//! so a lookup table recovers any byte it has seen.

use moe_leak::moe::{check_contextfree_injectivity, init_model, ModelConfig};

fn main() -> moe_leak::Result<()> {
    let mut cfg = ModelConfig::desk();
    cfg.context_free = true;
    let model = init_model(&cfg)?;
    for subset in [vec![0], vec![0, 1], vec![0, 1, 2, 3]] {
        let r = check_contextfree_injectivity(&model, &subset)?;
        println!(
            "layers {subset:?}: {} distinct traces over {} bytes, {} colliding, injective {}",
            r.distinct, cfg.vocab, r.collisions, r.injective
        );
    }
    Ok(())
}
