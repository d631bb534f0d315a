//! The full reference attack: lookup, MLP and sequence decoders trained on
//! 512K traced bytes and scored on a 64K held-out corpus.
//!
//! Takes several minutes per core; pass a smaller train size (in bytes) as
//! the first argument for a quick look.

use moe_leak::experiment::{chance_percent, reference_datasets, run_reference, ReferenceSetup, REFERENCE_FLOORS};

fn main() -> moe_leak::Result<()> {
    let mut setup = ReferenceSetup::default();
    if let Some(tokens) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        setup.train_tokens = tokens;
    }
    let (train, heldout) = reference_datasets(&setup)?;
    let start = std::time::Instant::now();
    let run = run_reference(&setup, &train, &heldout)?;
    for (name, r) in [("lookup", &run.lookup_report), ("mlp", &run.mlp_report), ("seq", &run.seq_report)] {
        println!("{name:>6}  top-1 {:6.2}  top-5 {:6.2}  top-10 {:6.2}", r.top1, r.top5, r.top10);
    }
    println!("chance {:.2}%, {:.0?} elapsed", chance_percent(setup.victim.vocab), start.elapsed());
    println!("pinned floors {REFERENCE_FLOORS:?}");
    Ok(())
}
