//! Combinatorial ceilings on routing information for a few model shapes.

use moe_leak::infolab::{binomial, selection_entropy_bound, trace_entropy_bound};

fn main() -> moe_leak::Result<()> {
    println!("L,n,k,C(n,k),per_layer_bits,trace_bits");
    for (l, n, k) in [(4, 8, 2), (24, 32, 4), (32, 64, 8), (48, 128, 8), (60, 256, 8)] {
        println!(
            "{l},{n},{k},{},{:.3},{:.1}",
            binomial(n as u64, k as u64),
            selection_entropy_bound(n, k)?,
            trace_entropy_bound(l, n, k)?
        );
    }
    Ok(())
}
