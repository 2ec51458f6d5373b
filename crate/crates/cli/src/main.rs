use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use chunkstream::decoder::{BeamConfig, DecodeMode};
use chunkstream::harness::{
    commit_records, compare_modes, config_args, corpus_vocab, evaluate, read_jsonl, run_all, sweep, sweep_csv,
    write_jsonl, CommitRecord, ModelHandle, SweepSpec, UtteranceRecord,
};
use chunkstream::model::{EncoderKind, SequenceModel, SyntheticConfig, TinyTransformer, TransformerConfig};
use chunkstream::training::{adapt, gen_dataset, train, AdaptConfig, LossPoint, LrDecay, PartialSliceSpec, SyntheticTaskSpec, TrainConfig};
use chunkstream::{StrategyConfig, Utterance, Vocab};

#[derive(Parser)]
#[command(name = "chunkstream", version, about = "Chunk-based streaming decoding with offline sequence models")]
#[command(args_override_self = true)]
struct Cli {
    /// File of `key = value` lines applied before the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic utterance set.
    GenData(GenDataArgs),
    /// Train a transformer on full utterances.
    Train(TrainArgs),
    /// Fine-tune a model on a mix of full and partial utterances.
    Adapt(AdaptArgs),
    /// Stream every utterance of a set through one strategy.
    Run(RunArgs),
    /// Evaluate a grid of models, strategies and chunk lengths.
    Sweep(SweepArgs),
    /// Check that forced re-decoding and buffered states commit the same tokens.
    CompareModes(CompareArgs),
    /// Score a commit log against references.
    Eval(EvalArgs),
    /// Write the attention weights of one utterance.
    DumpAttention(DumpArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_tokens: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(long)]
    phones_per_token: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    frame_period: Option<f64>,
    #[arg(long)]
    task_seed: Option<u64>,
    /// Attach reordered target sequences.
    #[arg(long)]
    translation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Uni,
    Bi,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Uni => EncoderKind::Unidirectional,
            EncoderArg::Bi => EncoderKind::Bidirectional,
        }
    }
}

#[derive(Args)]
struct OptimArgs {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Learning-rate shape after warmup: constant or inverse-sqrt.
    #[arg(long)]
    decay: Option<String>,
}

impl OptimArgs {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.label_smoothing {
            cfg.label_smoothing = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.decay {
            cfg.decay = match v.as_str() {
                "constant" => LrDecay::Constant,
                "inverse-sqrt" => LrDecay::InverseSqrt,
                other => bail!("unknown decay {other:?}"),
            };
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "uni")]
    encoder: EncoderArg,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ff_dim: Option<usize>,
    #[arg(long)]
    enc_layers: Option<usize>,
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Seed for the initial weights.
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    optim: OptimArgs,
    /// Loss curve destination (CSV).
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Multiplier on the base learning rate.
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    p_min: Option<f64>,
    #[arg(long)]
    p_max: Option<f64>,
    #[arg(long)]
    dev_beam: Option<usize>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct StrategyArgs {
    /// hold-n, hold-0, wait-k, local-agreement or offline.
    #[arg(long, default_value = "hold-0")]
    strategy: String,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Tokens per second of audio for wait-k.
    #[arg(long)]
    rate: Option<f64>,
}

impl StrategyArgs {
    fn config(&self) -> Result<StrategyConfig> {
        Ok(StrategyConfig::parse(&self.strategy, self.n, self.k, self.rate)?)
    }
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long, default_value_t = 0.5)]
    chunk_sec: f64,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value = "forced")]
    mode: DecodeMode,
}

impl DecodeArgs {
    fn beam(&self) -> BeamConfig {
        BeamConfig::with_beam(self.beam)
    }
}

#[derive(Args)]
struct RunArgs {
    /// Model file, or `synthetic[:seed]` / `stable` for the alignment-driven model.
    #[arg(long)]
    model: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[command(flatten)]
    decode: DecodeArgs,
    /// Wait one chunk length before each chunk and print commits as they happen.
    #[arg(long)]
    realtime: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// `tag=model`, repeatable; the first model is the latency baseline.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Strategy like `hold-n:4`, `wait-k:1:4`, `local-agreement`; repeatable.
    /// Defaults to the standard grid.
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    #[arg(long = "chunk-sec", default_values_t = [0.5])]
    chunk_secs: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    beam: usize,
    #[arg(long, default_value = "forced")]
    mode: DecodeMode,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    model: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    chunk_sec: Option<f64>,
    #[arg(long)]
    beam: Option<usize>,
    #[command(flatten)]
    strategy: StrategyArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    commits: PathBuf,
    /// Utterance file holding the references.
    #[arg(long)]
    refs: PathBuf,
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    /// Utterance id; defaults to the first one.
    #[arg(long)]
    utt: Option<String>,
    /// Space-separated decoder prefix; defaults to the reference.
    #[arg(long)]
    prefix: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    let cli = Cli::parse_from(expand_config(std::env::args().collect())?);
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::CompareModes(a) => compare_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DumpAttention(a) => dump_cmd(a),
    }
}

/// Splices the config file's flags in right after the subcommand, so that
/// flags given on the command line win.
fn expand_config(mut args: Vec<String>) -> Result<Vec<String>> {
    let Some(pos) = args.iter().position(|a| a == "--config" || a.starts_with("--config=")) else {
        return Ok(args);
    };
    let path = match args[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => args.get(pos + 1).cloned().context("--config needs a path")?,
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {path}"))?;
    let extra = config_args(&text)?;
    const COMMANDS: [&str; 8] = ["gen-data", "train", "adapt", "run", "sweep", "compare-modes", "eval", "dump-attention"];
    let sub = args.iter().position(|a| COMMANDS.contains(&a.as_str())).map(|i| i + 1).unwrap_or(args.len());
    args.splice(sub..sub, extra);
    Ok(args)
}

fn read_records(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?)
}

fn to_utterances(records: &[UtteranceRecord], vocab: &Vocab) -> Result<Vec<Utterance>> {
    records
        .iter()
        .map(|r| r.to_utterance(vocab).with_context(|| format!("utterance {}", r.id)))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_handle(spec: &str, records: &[UtteranceRecord]) -> Result<ModelHandle> {
    let period = records.first().map(|r| r.frame_period).unwrap_or(0.01);
    let cfg = match spec.split_once(':') {
        _ if spec == "stable" => Some(SyntheticConfig::stable()),
        _ if spec == "synthetic" => Some(SyntheticConfig::for_period(period, 0)),
        Some(("synthetic", seed)) => Some(SyntheticConfig::for_period(period, seed.parse().context("synthetic seed")?)),
        _ => None,
    };
    if let Some(cfg) = cfg {
        return Ok(ModelHandle::Synthetic { cfg, vocab: corpus_vocab(records)? });
    }
    let m = TinyTransformer::load(spec).with_context(|| format!("loading model {spec}"))?;
    Ok(ModelHandle::Transformer(Arc::new(m)))
}

fn write_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "step,loss,lr")?;
    for p in curve {
        writeln!(w, "{},{:.6},{:.8}", p.step, p.loss, p.lr)?;
    }
    w.flush()?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec = SyntheticTaskSpec { translation: a.translation, ..Default::default() };
    if let Some(v) = a.vocab_size {
        spec.vocab_size = v;
    }
    if let Some(v) = a.min_tokens {
        spec.min_tokens = v;
    }
    if let Some(v) = a.max_tokens {
        spec.max_tokens = v;
    }
    if let Some(v) = a.phones_per_token {
        spec.phones_per_token = v;
    }
    if let Some(v) = a.noise {
        spec.noise_std = v;
    }
    if let Some(v) = a.frame_period {
        spec.frame_period = v;
    }
    if let Some(v) = a.task_seed {
        spec.task_seed = v;
    }
    let utts = gen_dataset(&spec, a.count, a.seed)?;
    let vocab = spec.vocab();
    let records = utts.iter().map(|u| UtteranceRecord::from_utterance(u, &vocab)).collect::<Result<Vec<_>, _>>()?;
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &records)?;
    w.flush()?;
    eprintln!("wrote {} utterances to {}", records.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let records = read_records(&a.data)?;
    let vocab = corpus_vocab(&records)?;
    let utts = to_utterances(&records, &vocab)?;
    let frame_dim = utts.first().map(|u| u.frame_dim()).context("empty training set")?;
    let mut mcfg = TransformerConfig::new(frame_dim, a.encoder.into());
    if let Some(v) = a.d_model {
        mcfg.d_model = v;
    }
    if let Some(v) = a.heads {
        mcfg.heads = v;
    }
    if let Some(v) = a.ff_dim {
        mcfg.ff_dim = v;
    }
    if let Some(v) = a.enc_layers {
        mcfg.enc_layers = v;
    }
    if let Some(v) = a.dec_layers {
        mcfg.dec_layers = v;
    }
    let model = TinyTransformer::new(mcfg, vocab, a.init_seed)?;
    let mut cfg = TrainConfig::default();
    a.optim.apply(&mut cfg)?;
    let out = train(&model, &utts, &cfg)?;
    if let Some(last) = out.curve.last() {
        eprintln!("step {} loss {:.4}", last.step, last.loss);
    }
    out.model.save(&a.out)?;
    if let Some(p) = a.curve {
        write_curve(&p, &out.curve)?;
    }
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let model = TinyTransformer::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let vocab = model.vocab().clone();
    let data = to_utterances(&read_records(&a.data)?, &vocab)?;
    let dev = to_utterances(&read_records(&a.dev)?, &vocab)?;
    let mut cfg = AdaptConfig::default();
    a.optim.apply(&mut cfg.base)?;
    if let Some(v) = a.optim.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.optim.warmup {
        cfg.warmup = v;
    }
    if let Some(v) = a.lr_scale {
        cfg.lr_scale = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    cfg.slice = PartialSliceSpec { p_min: a.p_min.unwrap_or(cfg.slice.p_min), p_max: a.p_max.unwrap_or(cfg.slice.p_max) };
    if let Some(b) = a.dev_beam {
        cfg.dev_beam.beam = b;
    }
    let out = adapt(&model, &data, &dev, &cfg)?;
    eprintln!("dev TER before {:.4}", out.dev_before.rate());
    for c in &out.checkpoints {
        eprintln!("step {} dev TER {:.4}", c.step, c.dev.rate());
    }
    eprintln!("selected step {}", out.selected_step);
    out.model.save(&a.out)?;
    if let Some(p) = a.curve {
        write_curve(&p, &out.curve)?;
    }
    Ok(())
}

fn run_cmd(a: RunArgs) -> Result<()> {
    let records = read_records(&a.input)?;
    let handle = load_handle(&a.model, &records)?;
    let vocab = handle.vocab().clone();
    let utts = to_utterances(&records, &vocab)?;
    let strategy = a.strategy.config()?;
    let beam = a.decode.beam();
    let mut out = Vec::new();
    if a.realtime {
        for u in &utts {
            let log = handle.run_realtime(u, a.decode.chunk_sec, strategy, &beam, a.decode.mode, &mut |chunk, tokens| {
                if let Ok(words) = vocab.decode(tokens) {
                    if !words.is_empty() {
                        println!("{} chunk {chunk}: {}", u.id, words.join(" "));
                    }
                }
            })?;
            out.extend(commit_records(&u.id, &log, &vocab)?);
        }
    } else {
        let logs = run_all(&handle, &utts, a.decode.chunk_sec, strategy, &beam, a.decode.mode);
        for (u, r) in utts.iter().zip(logs) {
            let (log, _) = r.with_context(|| format!("decoding {}", u.id))?;
            out.extend(commit_records(&u.id, &log, &vocab)?);
        }
    }
    let mut w = create(&a.out)?;
    write_jsonl(&mut w, &out)?;
    w.flush()?;
    Ok(())
}

fn parse_strategy(s: &str) -> Result<StrategyConfig> {
    let mut parts = s.split(':');
    let name = parts.next().unwrap_or_default();
    let nums: Vec<&str> = parts.collect();
    let cfg = match (name, nums.as_slice()) {
        ("hold-n", [n]) => StrategyConfig::parse(name, Some(n.parse()?), None, None)?,
        ("wait-k", [k, r]) => StrategyConfig::parse(name, None, Some(k.parse()?), Some(r.parse()?))?,
        (_, []) => StrategyConfig::parse(name, None, None, None)?,
        _ => bail!("cannot parse strategy {s:?}"),
    };
    Ok(cfg)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let records = read_records(&a.input)?;
    let mut models = Vec::new();
    for m in &a.models {
        let (tag, spec) = m.split_once('=').with_context(|| format!("expected tag=model, got {m:?}"))?;
        models.push((tag.to_string(), load_handle(spec, &records)?));
    }
    let vocab = models[0].1.vocab().clone();
    for (tag, h) in &models[1..] {
        if h.vocab() != &vocab {
            bail!("model {tag} has a different vocabulary from {}", models[0].0);
        }
    }
    let utts = to_utterances(&records, &vocab)?;
    let strategies = if a.strategies.is_empty() {
        SweepSpec::default_strategies()
    } else {
        a.strategies.iter().map(|s| parse_strategy(s)).collect::<Result<_>>()?
    };
    let spec = SweepSpec {
        models,
        strategies,
        chunk_lens: a.chunk_secs,
        beam: BeamConfig::with_beam(a.beam),
        mode: a.mode,
    };
    let rows = sweep(&spec, &utts)?;
    for r in rows.iter().filter(|r| r.outcome.is_err()) {
        eprintln!("{} {} failed: {}", r.model, r.strategy, r.outcome.as_ref().unwrap_err());
    }
    std::fs::write(&a.out, sweep_csv(&rows)).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let records = read_records(&a.input)?;
    let handle = load_handle(&a.model, &records)?;
    let utts = to_utterances(&records, handle.vocab())?;
    let beam = BeamConfig::with_beam(a.beam.unwrap_or(8));
    let report = compare_modes(&handle, &utts, a.chunk_sec.unwrap_or(0.5), a.strategy.config()?, &beam)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, &json)?,
        None => println!("{json}"),
    }
    if let Some(d) = &report.first_divergence {
        bail!("modes diverge on {} ({})", d.utterance, d.detail);
    }
    Ok(())
}

fn read_commits(path: &Path) -> Result<Vec<CommitRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(f))?)
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let refs = read_records(&a.refs)?;
    let commits = read_commits(&a.commits)?;
    let baseline = a.baseline.as_deref().map(read_commits).transpose()?;
    let chunk_len = commits
        .iter()
        .chain(baseline.iter().flatten())
        .map(|c| c.t_out / c.chunk as f64)
        .next()
        .unwrap_or(0.5);
    let summary = evaluate(&refs, &commits, baseline.as_deref(), chunk_len)?;
    let json = serde_json::to_string(&summary)?;
    match &a.out {
        Some(p) => std::fs::write(p, format!("{json}\n"))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn dump_cmd(a: DumpArgs) -> Result<()> {
    let model = TinyTransformer::load(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let records = read_records(&a.input)?;
    let rec = match &a.utt {
        Some(id) => records.iter().find(|r| &r.id == id).with_context(|| format!("no utterance {id}"))?,
        None => records.first().context("empty utterance file")?,
    };
    let prefix: Vec<String> = match &a.prefix {
        Some(p) => p.split_whitespace().map(str::to_string).collect(),
        None => rec.output_words().to_vec(),
    };
    let prefix = model.vocab().encode(&prefix)?;
    let enc = model.encode(&rec.frames, None)?;
    let dump = model.attention_weights(&enc, &prefix)?;
    std::fs::write(&a.out, dump.to_grid_text()).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}
