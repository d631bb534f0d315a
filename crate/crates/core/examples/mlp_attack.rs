//! Trains the per-position MLP decoder and prints its loss curve.

use moe_leak::cli::{default_train_config, Arch};
use moe_leak::decoders::{eval_topk, train_mlp, DecoderModel, MlpDecoderConfig};
use moe_leak::experiment::synth_dataset;
use moe_leak::moe::ModelConfig;

fn main() -> moe_leak::Result<()> {
    let victim = ModelConfig::desk();
    let train = synth_dataset(&victim, 1, 128 * 1024, 32)?;
    let heldout = synth_dataset(&victim, 2, 16 * 1024, 32)?;
    let mut cfg = default_train_config(Arch::Mlp, 1);
    cfg.epochs = 2;
    let (mlp, curve) = train_mlp(&train, &MlpDecoderConfig::default(), &cfg)?;
    print!("{}", curve.to_csv());
    let report = eval_topk(&DecoderModel::Mlp(mlp), &heldout)?;
    println!("held-out top-1 {:.2}%  top-5 {:.2}%  top-10 {:.2}%", report.top1, report.top5, report.top10);
    Ok(())
}
