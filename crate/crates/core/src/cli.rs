//! Batch front-end. Every subcommand is a pure function of its flags and
//! seeds; each writes its artifacts plus a `<out>.run.json` manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{read_corpus_file, synth_corpus, tokenize_bytes};
use crate::decoders::{
    eval_topk, freq_bucket_accuracy, read_checkpoint, train_lookup, train_mlp, train_seq,
    write_checkpoint, Checkpoint, DecoderModel, EvalReport, MlpDecoderConfig, SeqDecoderConfig,
    TrainConfig, DEFAULT_BUCKET_WIDTH,
};
use crate::error::{bail, Error, Result};
use crate::infolab::{
    entropy_csv, layer_profile, mi_csv, mi_heatmap, selection_entropy_bound, trace_entropy_bound,
};
use crate::moe::{init_model, ModelConfig};
use crate::selftest;
use crate::trace::{generate_dataset, read_dataset, write_dataset, TraceDataset};
use crate::write_atomic;

#[derive(Debug, Parser)]
#[command(name = "moe-leak", version, about = "Text reconstruction from MoE routing traces")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Seed for corpus synthesis, decoder init and noise.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,
    /// JSON file with a model (generate) or decoder (train, sweep) config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Primary output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trace a corpus through the victim and write a dataset file.
    Generate(GenerateArgs),
    /// Train a decoder on a dataset.
    Train(TrainArgs),
    /// Top-k evaluation of a checkpoint on a held-out dataset.
    Eval(EvalArgs),
    /// Noise or training-size sweep.
    Sweep(SweepArgs),
    /// Entropy, mutual information or bound analysis.
    Analyze(AnalyzeArgs),
    /// Gradient checks, estimator oracles and fixture validation.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Synthetic corpus length, e.g. 512K or 65536.
    #[arg(long, default_value = "512K", value_parser = parse_count)]
    pub tokens: usize,
    /// Read the corpus from this file instead of synthesizing one.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus label recorded in the manifest.
    #[arg(long)]
    pub corpus_id: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub chunk: usize,
    /// Observed layers, e.g. 0,1 (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Disable attention and positions in the victim.
    #[arg(long)]
    pub context_free: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Lookup,
    Mlp,
    Seq,
}

#[derive(Debug, Args, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = Arch::Seq)]
    pub arch: Arch,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Topk,
    Freq,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportKind::Topk)]
    pub report: ReportKind,
    #[arg(long, default_value_t = DEFAULT_BUCKET_WIDTH)]
    pub bucket_width: f64,
    /// Evaluate even if the dataset is the training dataset.
    #[arg(long)]
    pub allow_train_data: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepMode {
    Noise,
    Size,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub mode: SweepMode,
    /// Held-out dataset.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Checkpoint to corrupt-evaluate (noise mode).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training dataset whose prefixes are trained on (size mode).
    #[arg(long)]
    pub train_dataset: Option<PathBuf>,
    /// Noise rates (noise mode) or training fractions (size mode).
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[command(flatten)]
    pub train: SweepTrain,
}

#[derive(Debug, Args, Clone)]
pub struct SweepTrain {
    #[arg(long, value_enum, default_value_t = Arch::Seq)]
    pub arch: Arch,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeMode {
    Entropy,
    Mi,
    Bounds,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub mode: AnalyzeMode,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Layer count for bounds mode (default: the dataset's).
    #[arg(long = "L")]
    pub layers: Option<usize>,
    /// Experts per layer for bounds mode.
    #[arg(long = "n")]
    pub experts: Option<usize>,
    /// Selected experts per token for bounds mode.
    #[arg(long = "k")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Directory holding reference fixture CSVs (default: the bundled copies).
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
}

/// Accepts plain integers and `K`/`M` binary suffixes.
pub fn parse_count(s: &str) -> std::result::Result<usize, String> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1024),
        Some('M' | 'm') => (&s[..s.len() - 1], 1024 * 1024),
        _ => (s, 1),
    };
    num.parse::<usize>()
        .map(|n| n * mult)
        .map_err(|e| format!("invalid count {s:?}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
    pub tool_version: String,
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: hex::encode(Sha256::digest(&bytes)),
    })
}

/// What a command produced; `lines` is the human summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub lines: Vec<String>,
    pub outputs: Vec<PathBuf>,
    pub failed: bool,
}

impl Outcome {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }
}

/// Decoder settings accepted by `--config` in `train` and `sweep`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderFileConfig {
    pub mlp: Option<MlpDecoderConfig>,
    pub seq: Option<SeqDecoderConfig>,
    pub train: Option<TrainConfig>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn require_out(common: &Common) -> Result<PathBuf> {
    common
        .out
        .clone()
        .ok_or_else(|| Error::Argument("--out is required".into()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Default training schedule per architecture.
pub fn default_train_config(arch: Arch, seed: u64) -> TrainConfig {
    match arch {
        Arch::Seq => TrainConfig {
            epochs: 4,
            batch_size: 16,
            lr: 1e-3,
            lr_final_fraction: 0.1,
            seed,
            ..TrainConfig::default()
        },
        _ => TrainConfig {
            epochs: 3,
            batch_size: 256,
            lr: 2e-3,
            lr_final_fraction: 0.1,
            seed,
            ..TrainConfig::default()
        },
    }
}

struct TrainPlan {
    mlp: MlpDecoderConfig,
    seq: SeqDecoderConfig,
    train: TrainConfig,
}

fn train_plan(common: &Common, arch: Arch, depth: Option<usize>, epochs: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> Result<TrainPlan> {
    let file: DecoderFileConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => DecoderFileConfig::default(),
    };
    let mut mlp = file.mlp.unwrap_or_default();
    if let Some(d) = depth {
        mlp.depth = d;
    }
    let mut train = file.train.unwrap_or_else(|| default_train_config(arch, common.seed));
    train.seed = common.seed;
    if let Some(e) = epochs {
        train.epochs = e;
    }
    if let Some(b) = batch {
        train.batch_size = b;
    }
    if let Some(l) = lr {
        train.lr = l;
    }
    Ok(TrainPlan {
        mlp,
        seq: file.seq.unwrap_or_default(),
        train,
    })
}

/// Trains the requested decoder; the lookup ignores the schedule.
pub fn train_decoder(ds: &TraceDataset, arch: Arch, mlp: &MlpDecoderConfig, seq: &SeqDecoderConfig, train: &TrainConfig) -> Result<(Checkpoint, Option<crate::decoders::LossCurve>)> {
    let (decoder, curve, cfg) = match arch {
        Arch::Lookup => (DecoderModel::Lookup(train_lookup(ds)?), None, None),
        Arch::Mlp => {
            let (m, c) = train_mlp(ds, mlp, train)?;
            (DecoderModel::Mlp(m), Some(c), Some(train.clone()))
        }
        Arch::Seq => {
            let (s, c) = train_seq(ds, seq, train)?;
            (DecoderModel::Seq(s), Some(c), Some(train.clone()))
        }
    };
    Ok((
        Checkpoint {
            decoder,
            train: cfg,
            dataset_digest: ds.digest()?,
            train_token_counts: ds.token_counts(),
        },
        curve,
    ))
}

fn report_line(name: &str, r: &EvalReport) -> String {
    format!("{name}: top1 {:.2}%  top5 {:.2}%  top10 {:.2}%  ({} positions)", r.top1, r.top5, r.top10, r.samples)
}

fn sweep_csv(rows: &[(f64, EvalReport)]) -> String {
    let mut s = String::from("x,top1,top5,top10\n");
    for (x, r) in rows {
        s.push_str(&format!("{x},{:.2},{:.2},{:.2}\n", r.top1, r.top5, r.top10));
    }
    s
}

fn write_text(path: &Path, text: &str, outcome: &mut Outcome) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    outcome.outputs.push(path.to_path_buf());
    Ok(())
}

fn cmd_generate(common: &Common, a: &GenerateArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let out = require_out(common)?;
    let mut model_cfg: ModelConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => ModelConfig::desk(),
    };
    if a.context_free {
        model_cfg.context_free = true;
    }
    let (bytes, corpus_id, inputs) = match &a.corpus {
        Some(p) => {
            let id = a.corpus_id.clone().unwrap_or_else(|| p.display().to_string());
            (read_corpus_file(p)?, id, vec![p.clone()])
        }
        None => {
            let id = a.corpus_id.clone().unwrap_or_else(|| format!("synth:{}:{}", common.seed, a.tokens));
            (synth_corpus(common.seed, a.tokens)?, id, Vec::new())
        }
    };
    let model = init_model(&model_cfg)?;
    let ds = generate_dataset(&tokenize_bytes(&bytes), &corpus_id, &model, a.chunk, a.layers.as_deref())?;
    write_dataset(&ds, &out)?;
    let mut o = Outcome::default();
    o.outputs.push(out.clone());
    let model_path = sibling(&out, ".model.json");
    model.write_manifest(&model_path)?;
    o.outputs.push(model_path);
    o.say(serde_json::to_string_pretty(&ds.manifest)?);
    o.say(format!("dataset digest {}", ds.digest()?));
    let cfg = serde_json::json!({ "model": model_cfg, "tokens": a.tokens, "chunk": a.chunk, "layers": ds.manifest.observed_layers, "corpus_id": corpus_id, "seed": common.seed });
    Ok((o, cfg, inputs))
}

fn cmd_train(common: &Common, a: &TrainArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let out = require_out(common)?;
    let ds = read_dataset(&a.dataset)?;
    let plan = train_plan(common, a.arch, a.depth, a.epochs, a.batch_size, a.lr)?;
    let (ck, curve) = train_decoder(&ds, a.arch, &plan.mlp, &plan.seq, &plan.train)?;
    write_checkpoint(&ck, &out)?;
    let mut o = Outcome::default();
    o.outputs.push(out.clone());
    if let Some(c) = &curve {
        write_text(&sibling(&out, ".loss.csv"), &c.to_csv(), &mut o)?;
        for e in &c.epochs {
            o.say(format!("epoch {}: train {:.4} probe {:.4} nats", e.epoch, e.train_loss, e.probe_loss));
        }
    }
    o.say(format!("trained {:?} decoder on {} chunks", a.arch, ds.len()));
    let cfg = serde_json::json!({ "arch": a.arch, "mlp": plan.mlp, "seq": plan.seq, "train": plan.train });
    Ok((o, cfg, vec![a.dataset.clone()]))
}

fn cmd_eval(common: &Common, a: &EvalArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let out = require_out(common)?;
    let ck = read_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.dataset)?;
    let mut o = Outcome::default();
    if ds.digest()? == ck.dataset_digest {
        if !a.allow_train_data {
            bail!(Argument, "evaluation dataset is the training dataset (pass --allow-train-data to override)");
        }
        o.say("warning: evaluating on the training dataset");
    }
    let mut report = eval_topk(&ck.decoder, &ds)?;
    if a.report == ReportKind::Freq {
        report.buckets = freq_bucket_accuracy(&ck.decoder, &ds, &ck.train_token_counts, a.bucket_width)?;
        write_text(&sibling(&out, ".freq.csv"), &report.buckets_csv(), &mut o)?;
    }
    write_text(&out, &serde_json::to_string_pretty(&report)?, &mut o)?;
    let csv = format!("top1,top5,top10,samples\n{:.2},{:.2},{:.2},{}\n", report.top1, report.top5, report.top10, report.samples);
    write_text(&sibling(&out, ".csv"), &csv, &mut o)?;
    o.say(report_line(ck.decoder.arch(), &report));
    let cfg = serde_json::json!({ "report": format!("{:?}", a.report).to_lowercase(), "bucket_width": a.bucket_width });
    Ok((o, cfg, vec![a.checkpoint.clone(), a.dataset.clone()]))
}

/// Default noise grid: 0.0 to 1.0 in steps of 0.1.
pub fn default_noise_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Top-k of `decoder` on `ds` corrupted at each rate.
pub fn noise_sweep(decoder: &DecoderModel, ds: &TraceDataset, grid: &[f64], seed: u64) -> Result<Vec<(f64, EvalReport)>> {
    if grid.is_empty() {
        bail!(Argument, "empty sweep grid");
    }
    grid.iter().map(|&p| Ok((p, eval_topk(decoder, &ds.corrupt(p, seed)?)?))).collect()
}

/// Retrains on nested record prefixes (fractions of `train`) and evaluates.
pub fn size_sweep(train: &TraceDataset, heldout: &TraceDataset, fractions: &[f64], arch: Arch, mlp: &MlpDecoderConfig, seq: &SeqDecoderConfig, cfg: &TrainConfig) -> Result<Vec<(f64, EvalReport)>> {
    if fractions.is_empty() {
        bail!(Argument, "empty sweep grid");
    }
    let mut out = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            bail!(Argument, "training fraction {f} outside (0, 1]");
        }
        let n = ((train.len() as f64 * f).round() as usize).max(1);
        let (ck, _) = train_decoder(&train.prefix(n), arch, mlp, seq, cfg)?;
        out.push(((n * train.manifest.seq_len) as f64, eval_topk(&ck.decoder, heldout)?));
    }
    Ok(out)
}

fn cmd_sweep(common: &Common, a: &SweepArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let out = require_out(common)?;
    let heldout = read_dataset(&a.dataset)?;
    let mut o = Outcome::default();
    let (rows, inputs, cfg) = match a.mode {
        SweepMode::Noise => {
            let Some(ckp) = &a.checkpoint else {
                bail!(Argument, "noise sweep needs --checkpoint");
            };
            let ck = read_checkpoint(ckp)?;
            let grid = a.grid.clone().unwrap_or_else(default_noise_grid);
            let rows = noise_sweep(&ck.decoder, &heldout, &grid, common.seed)?;
            (rows, vec![ckp.clone(), a.dataset.clone()], serde_json::json!({ "mode": "noise", "grid": grid, "seed": common.seed }))
        }
        SweepMode::Size => {
            let Some(tp) = &a.train_dataset else {
                bail!(Argument, "size sweep needs --train-dataset");
            };
            let train = read_dataset(tp)?;
            let grid = a.grid.clone().unwrap_or_else(|| vec![1.0 / 16.0, 0.25, 1.0]);
            let plan = train_plan(common, a.train.arch, None, a.train.epochs, None, None)?;
            let rows = size_sweep(&train, &heldout, &grid, a.train.arch, &plan.mlp, &plan.seq, &plan.train)?;
            let cfg = serde_json::json!({ "mode": "size", "grid": grid, "arch": a.train.arch, "train": plan.train });
            (rows, vec![tp.clone(), a.dataset.clone()], cfg)
        }
    };
    for (x, r) in &rows {
        o.say(report_line(&format!("x={x}"), r));
    }
    write_text(&out, &sweep_csv(&rows), &mut o)?;
    Ok((o, cfg, inputs))
}

/// The three bound figures printed by `analyze --mode bounds`.
pub fn bounds_report(layers: usize, n: usize, k: usize) -> Result<(f64, f64)> {
    Ok((selection_entropy_bound(n, k)?, trace_entropy_bound(layers, n, k)?))
}

fn cmd_analyze(common: &Common, a: &AnalyzeArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let mut o = Outcome::default();
    let ds = a.dataset.as_ref().map(read_dataset).transpose()?;
    let inputs: Vec<PathBuf> = a.dataset.iter().cloned().collect();
    match a.mode {
        AnalyzeMode::Bounds => {
            let m = ds.as_ref().map(|d| &d.manifest);
            let layers = a.layers.or(m.map(|m| m.layers));
            let n = a.experts.or(m.map(|m| m.experts));
            let k = a.top_k.or(m.map(|m| m.top_k));
            let (Some(layers), Some(n), Some(k)) = (layers, n, k) else {
                bail!(Argument, "bounds need --L, --n and --k or a --dataset");
            };
            let (per_layer, total) = bounds_report(layers, n, k)?;
            o.say(format!("per-layer bound log2 C({n},{k}) = {per_layer:.3} bits"));
            o.say(format!("trace bound {layers} x log2 C({n},{k}) = {total:.1} bits"));
            let mut csv = format!("L,n,k,selection_bound_bits,trace_bound_bits,empirical_entropy_sum_bits\n{layers},{n},{k},{per_layer},{total},");
            if let Some(d) = &ds {
                let (_, sum) = layer_profile(d)?;
                o.say(format!("empirical per-layer entropy sum = {sum:.3} bits"));
                csv.push_str(&sum.to_string());
            }
            csv.push('\n');
            if let Some(out) = &common.out {
                write_text(out, &csv, &mut o)?;
            }
        }
        AnalyzeMode::Entropy => {
            let Some(d) = &ds else { bail!(Argument, "entropy analysis needs --dataset") };
            let (rows, sum) = layer_profile(d)?;
            o.say(format!("entropy sum over {} layers = {sum:.3} bits", rows.len()));
            write_text(&require_out(common)?, &entropy_csv(&rows), &mut o)?;
        }
        AnalyzeMode::Mi => {
            let Some(d) = &ds else { bail!(Argument, "MI analysis needs --dataset") };
            let rows = mi_heatmap(d)?;
            o.say(format!("{} layer pairs", rows.len()));
            write_text(&require_out(common)?, &mi_csv(&rows), &mut o)?;
        }
    }
    let cfg = serde_json::json!({ "mode": format!("{:?}", a.mode).to_lowercase(), "L": a.layers, "n": a.experts, "k": a.top_k });
    Ok((o, cfg, inputs))
}

fn cmd_selftest(_common: &Common, a: &SelftestArgs) -> Result<(Outcome, serde_json::Value, Vec<PathBuf>)> {
    let checks = selftest::run_all(a.fixtures.as_deref());
    let mut o = Outcome::default();
    for c in &checks {
        o.say(format!("{} {:<32} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
    }
    for line in selftest::reference_floor_lines() {
        o.say(line);
    }
    o.failed = checks.iter().any(|c| !c.passed);
    Ok((o, serde_json::json!({ "fixtures": a.fixtures }), Vec::new()))
}

/// Runs one parsed invocation and writes its run manifest next to `--out`.
pub fn execute(cli: &Cli) -> Result<Outcome> {
    let start = Instant::now();
    let (name, result) = match &cli.command {
        Command::Generate(a) => ("generate", cmd_generate(&cli.common, a)),
        Command::Train(a) => ("train", cmd_train(&cli.common, a)),
        Command::Eval(a) => ("eval", cmd_eval(&cli.common, a)),
        Command::Sweep(a) => ("sweep", cmd_sweep(&cli.common, a)),
        Command::Analyze(a) => ("analyze", cmd_analyze(&cli.common, a)),
        Command::Selftest(a) => ("selftest", cmd_selftest(&cli.common, a)),
    };
    let (outcome, config, inputs) = result?;
    if let (Some(out), false) = (&cli.common.out, outcome.outputs.is_empty()) {
        let manifest = RunManifest {
            command: name.to_string(),
            config,
            inputs: inputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
            outputs: outcome.outputs.iter().map(|p| file_digest(p)).collect::<Result<_>>()?,
            wall_time_s: start.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_atomic(&sibling(out, ".run.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(outcome)
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(o) => {
            if !cli.common.quiet || o.failed {
                for l in &o.lines {
                    println!("{l}");
                }
            }
            i32::from(o.failed)
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
