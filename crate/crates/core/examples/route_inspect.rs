//! Routes a sentence through the desk victim and prints the expert set
//! chosen for every byte at every layer.

use moe_leak::corpus::tokenize_bytes;
use moe_leak::moe::{init_model, ModelConfig};

fn main() -> moe_leak::Result<()> {
    let text = std::env::args().nth(1).unwrap_or_else(|| "The quick brown fox jumps over.".into());
    let model = init_model(&ModelConfig::desk())?;
    let tokens = tokenize_bytes(text.as_bytes());
    let trace = model.forward_trace(&tokens[..tokens.len().min(model.config.max_seq_len)])?;
    println!("victim digest {}", model.digest());
    print!("{:>6}", "byte");
    for l in trace.layers() {
        print!("  layer{l:<2}");
    }
    println!();
    for (t, &tok) in tokens.iter().take(trace.seq_len()).enumerate() {
        print!("{:>6}", format!("{:?}", tok as u8 as char));
        for l in 0..trace.num_layers() {
            print!("  {:<7}", format!("{:?}", trace.set(l, t)));
        }
        println!();
    }
    Ok(())
}
