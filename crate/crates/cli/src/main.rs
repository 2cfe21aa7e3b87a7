use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaptkit::datapipe::vocab::render;
use adaptkit::datapipe::{
    example_seed, prefixlm_split, read_corpus, read_dataset, teacher_record, ul2_mixture, write_dataset,
    PrefixLmExample, SyntheticCorpus, TrainingExample, Ul2Mixture, DEFAULT_TOP_K,
};
use adaptkit::evalbench::{
    estimate_flops, finetune_classifier, greedy_decode, measure_latency, perplexity, DecodeOptions, HeadConfig,
    ProbeData,
};
use adaptkit::io::{atomic_write, load_checkpoint, run_config, save_checkpoint, ReproRecord, RunConfig};
use adaptkit::model::{count_params, ArchKind, MaskKind, NamedCheckpoint, ParamConvention};
use adaptkit::surgery::{adapt, expand_gqa_to_mha, merge_uniform, AdaptationPlan, ExpandScope};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Build encoder-decoder models from decoder-only checkpoints, train them
/// and measure the result.
#[derive(Parser)]
#[command(name = "adaptkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a decoder-only model from a run config.
    PretrainDecoder(TrainArgs),
    /// Build an encoder-decoder checkpoint from decoder-only sources.
    Adapt(AdaptArgs),
    /// Train any model from a run config.
    Train(TrainArgs),
    /// Perplexity or greedy decoding.
    Eval(EvalArgs),
    /// Finetune a last-token classifier and report dev accuracy.
    Probe(ProbeArgs),
    /// Closed-form inference flops.
    Flops(FlopsArgs),
    /// Wall-clock greedy decoding latency.
    Latency(LatencyArgs),
    /// Uniformly average two checkpoints.
    Merge(MergeArgs),
    /// Replicate key/value heads so every query head has its own.
    ExpandMha(ExpandArgs),
    /// Print a checkpoint's manifest and parameter counts.
    Inspect(InspectArgs),
    /// Build PrefixLM or UL2 datasets, optionally with teacher sidecars.
    PrepData(PrepArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Allow training the 2B and 9B presets.
    #[arg(long)]
    i_know_this_is_huge: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Balanced,
    Unbalanced,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    encoder_src: PathBuf,
    /// Defaults to the encoder source.
    #[arg(long)]
    decoder_src: Option<PathBuf>,
    /// Cross-attention-only training steps recorded in the checkpoint.
    #[arg(long)]
    warmup_k: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    #[arg(long)]
    zero_init_output: bool,
    /// Keep the encoder causal instead of bidirectional.
    #[arg(long)]
    causal_encoder: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Perplexity,
    Decode,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum ObjectiveArg {
    Prefixlm,
    Ul2,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Text corpus (one sequence per line) or a prepared `.edsd` dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "prefixlm")]
    objective: ObjectiveArg,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the result and a reproducibility record here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `text<TAB>label` lines.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr_base: f64,
    #[arg(long, default_value_t = 3)]
    lr_steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "8,32")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    /// `S`, `2B`, `S-S`, `9B-2B`, ...
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    preset: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    in_len: usize,
    #[arg(long, default_value_t = 0)]
    out_len: usize,
}

#[derive(Args)]
struct LatencyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// One prompt per line.
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Number of prompts timed; drawn in a seeded order.
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct MergeArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Encoder,
    Decoder,
    All,
}

#[derive(Args)]
struct ExpandArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    scope: ScopeArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(conflicts_with = "preset", required_unless_present = "preset")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct PrepArgs {
    #[arg(long, value_enum, default_value = "prefixlm")]
    objective: ObjectiveArg,
    /// Text corpus; omit to generate a synthetic one.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Synthetic corpus settings as inline TOML, e.g. `num_sequences = 64`.
    #[arg(long, conflicts_with = "corpus")]
    synthetic: Option<String>,
    /// Re-cut the token stream into windows of this length.
    #[arg(long)]
    chunk_len: Option<usize>,
    /// Decoder-only checkpoint whose top-k distributions are attached.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset output (`.edsd`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the corpus as text, one sequence per line.
    #[arg(long)]
    text_out: Option<PathBuf>,
}

/// `println!` that exits quietly when the reader hangs up.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("writing to stdout: {e}");
        }
    }};
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn command_line() -> Vec<String> {
    std::env::args().skip(1).collect()
}

fn print_json(v: &serde_json::Value) {
    out!("{}", serde_json::to_string_pretty(v).expect("json value"));
}

fn load(path: &Path) -> Result<NamedCheckpoint> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn record_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".repro.json");
    PathBuf::from(s)
}

/// Writes `<out>.repro.json` for a command that produced `out`.
fn write_record(out: &Path, config: &serde_json::Value, seeds: &[(&str, u64)], inputs: &[&Path]) -> Result<()> {
    let mut rec = ReproRecord::new(command_line(), config)?;
    for (n, s) in seeds {
        rec.seed(n, *s);
    }
    for p in inputs {
        rec.input(p)?;
    }
    rec.output(out)?;
    rec.save(&record_path(out))?;
    Ok(())
}

fn write_result(out: &Path, result: &serde_json::Value, seeds: &[(&str, u64)], inputs: &[&Path]) -> Result<()> {
    atomic_write(out, serde_json::to_string_pretty(result)?.as_bytes())?;
    write_record(out, result, seeds, inputs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainDecoder(a) => train(a, true),
        Command::Train(a) => train(a, false),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Probe(a) => probe(a),
        Command::Flops(a) => flops(a),
        Command::Latency(a) => latency(a),
        Command::Merge(a) => {
            let merged = merge_uniform(&load(&a.a)?, &load(&a.b)?)?;
            save_checkpoint(&merged, &a.out)?;
            write_record(&a.out, &json!({"merge": [a.a, a.b]}), &[], &[&a.a, &a.b])?;
            out!("wrote {}", a.out.display());
            Ok(())
        }
        Command::ExpandMha(a) => {
            let scope = match a.scope {
                ScopeArg::Encoder => ExpandScope::Encoder,
                ScopeArg::Decoder => ExpandScope::Decoder,
                ScopeArg::All => ExpandScope::All,
            };
            let out = expand_gqa_to_mha(&load(&a.ckpt)?, scope)?;
            save_checkpoint(&out, &a.out)?;
            write_record(&a.out, &json!({"expand_mha": a.ckpt}), &[], &[&a.ckpt])?;
            out!("wrote {}", a.out.display());
            Ok(())
        }
        Command::Inspect(a) => inspect(a),
        Command::PrepData(a) => prep_data(a),
    }
}

fn train(a: TrainArgs, decoder_only: bool) -> Result<()> {
    let mut cfg = RunConfig::load_unchecked(&a.config)?;
    cfg.allow_huge |= a.i_know_this_is_huge;
    cfg.validate()?;
    if decoder_only && cfg.model.resolve()?.is_encoder_decoder() {
        bail!("pretrain-decoder needs a decoder-only model");
    }
    let outcome = run_config(&cfg, command_line())?;
    if let Some(last) = outcome.rows.last() {
        print_json(&json!({
            "steps": last.step,
            "tokens": last.tokens,
            "train_loss": last.train_loss,
            "eval_loss": last.eval_loss,
            "output_dir": cfg.output_dir,
        }));
    }
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> Result<()> {
    let enc = load(&a.encoder_src)?;
    let dec_path = a.decoder_src.clone().unwrap_or_else(|| a.encoder_src.clone());
    let dec = load(&dec_path)?;
    let mut plan = match a.mode {
        ModeArg::Balanced => {
            let mut p = AdaptationPlan::balanced(dec);
            p.encoder_source = enc;
            p
        }
        ModeArg::Unbalanced => AdaptationPlan::unbalanced(enc, dec, 0, a.seed),
    };
    plan.warmup_steps = a.warmup_k.unwrap_or(0);
    plan.init_seed = a.seed;
    plan.cross_attn_init_scale = a.init_scale;
    plan.zero_init_output = a.zero_init_output;
    let mut out = adapt(&plan)?;
    if a.causal_encoder {
        out.meta_mut().encoder_mask = MaskKind::Causal;
    }
    save_checkpoint(&out, &a.out)?;
    write_record(
        &a.out,
        &json!({
            "mode": match a.mode { ModeArg::Balanced => "balanced", ModeArg::Unbalanced => "unbalanced" },
            "warmup_k": a.warmup_k,
            "init_scale": a.init_scale,
            "zero_init_output": a.zero_init_output,
            "causal_encoder": a.causal_encoder,
        }),
        &[("init", a.seed)],
        &[&a.encoder_src, &dec_path],
    )?;
    out!("wrote {}", a.out.display());
    Ok(())
}

fn load_examples(path: &Path, objective: ObjectiveArg, seed: u64) -> Result<Vec<TrainingExample>> {
    if path.extension().is_some_and(|e| e == "edsd") {
        return Ok(read_dataset(path)?);
    }
    let seqs: Vec<Vec<u32>> = read_corpus(path)?.into_iter().filter(|s| s.len() >= 2).collect();
    examples_from(seqs, objective, seed)
}

fn examples_from(seqs: Vec<Vec<u32>>, objective: ObjectiveArg, seed: u64) -> Result<Vec<TrainingExample>> {
    Ok(match objective {
        ObjectiveArg::Prefixlm => seqs
            .iter()
            .map(|s| prefixlm_split(s).map(Into::into))
            .collect::<adaptkit::Result<_>>()?,
        ObjectiveArg::Ul2 => ul2_mixture(seqs, &Ul2Mixture::default(), seed)?
            .map(|e| e.map(Into::into))
            .collect::<adaptkit::Result<_>>()?,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    let result = match a.task {
        TaskArg::Perplexity => {
            let ex = load_examples(&a.data, a.objective, a.seed)?;
            let ppl = perplexity(&ckpt, &ex, a.batch_size)?;
            json!({"task": "perplexity", "examples": ex.len(), "perplexity": ppl, "nll": ppl.ln()})
        }
        TaskArg::Decode => {
            let prompts = read_corpus(&a.data)?;
            let mut outputs = Vec::new();
            for p in prompts.iter().filter(|p| !p.is_empty()) {
                let out = greedy_decode(&ckpt, p, DecodeOptions::new(a.max_new))?;
                outputs.push(json!({"prompt": render(p), "output": render(&out)}));
            }
            json!({"task": "decode", "max_new": a.max_new, "outputs": outputs})
        }
    };
    print_json(&result);
    if let Some(out) = &a.out {
        write_result(out, &result, &[("data", a.seed)], &[&a.ckpt, &a.data])?;
    }
    Ok(())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    let data = ProbeData::load(&a.train, &a.dev)?;
    let cfg = HeadConfig {
        epochs: a.epochs,
        lr_base: a.lr_base,
        lr_steps: a.lr_steps,
        batch_sizes: a.batch_sizes.clone(),
        seed: a.seed,
        ..Default::default()
    };
    let res = finetune_classifier(&ckpt, &data, &cfg)?;
    let result = json!({"classes": data.classes, "config": cfg, "result": res});
    print_json(&result);
    if let Some(out) = &a.out {
        write_result(out, &result, &[("head", a.seed)], &[&a.ckpt, &a.train, &a.dev])?;
    }
    Ok(())
}

fn flops(a: FlopsArgs) -> Result<()> {
    let arch = match (&a.preset, &a.ckpt) {
        (Some(p), _) => ArchKind::from_preset(p)?,
        (None, Some(c)) => load(c)?.arch().clone(),
        (None, None) => unreachable!("clap requires one"),
    };
    print_json(&serde_json::to_value(estimate_flops(&arch, a.in_len, a.out_len))?);
    Ok(())
}

fn latency(a: LatencyArgs) -> Result<()> {
    let ckpt = load(&a.ckpt)?;
    let mut prompts: Vec<Vec<u32>> = read_corpus(&a.prompts)?;
    if prompts.is_empty() {
        bail!("{} has no prompts", a.prompts.display());
    }
    let mut keyed: Vec<(u64, Vec<u32>)> = prompts
        .drain(..)
        .enumerate()
        .map(|(i, p)| (example_seed(a.seed, i as u64), p))
        .collect();
    keyed.sort_by_key(|(k, _)| *k);
    let n = a.queries.unwrap_or(keyed.len()).min(keyed.len());
    let chosen: Vec<Vec<u32>> = keyed.into_iter().take(n).map(|(_, p)| p).collect();
    let report = measure_latency(&ckpt, &chosen, a.max_new, a.warmup)?;
    print_json(&serde_json::to_value(report)?);
    Ok(())
}

fn arch_rows(arch: &ArchKind) -> Vec<serde_json::Value> {
    let row = |role: &str, c: &adaptkit::model::ModelConfig| {
        json!({
            "stack": role,
            "layers": c.num_layers,
            "d_model": c.d_model,
            "d_ffn": c.d_ffn,
            "heads": format!("{}/{}", c.q_heads, c.kv_heads),
            "d_head": c.d_head,
            "vocab": c.vocab_size,
        })
    };
    let mut rows = Vec::new();
    if let Some(e) = arch.encoder() {
        rows.push(row("encoder", e));
    }
    rows.push(row("decoder", arch.decoder()));
    rows
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (arch, ckpt) = match (&a.ckpt, &a.preset) {
        (Some(p), _) => {
            let c = load(p)?;
            (c.arch().clone(), Some(c))
        }
        (None, Some(p)) => (ArchKind::from_preset(p)?, None),
        (None, None) => unreachable!("clap requires one"),
    };
    out!("{:<8} {:>6} {:>8} {:>8} {:>7} {:>6}", "stack", "layers", "d_model", "d_ffn", "q/kv", "d_head");
    for r in arch_rows(&arch) {
        out!(
            "{:<8} {:>6} {:>8} {:>8} {:>7} {:>6}",
            r["stack"].as_str().unwrap(),
            r["layers"].to_string(),
            r["d_model"].to_string(),
            r["d_ffn"].to_string(),
            r["heads"].as_str().unwrap(),
            r["d_head"].to_string()
        );
    }
    let counts = count_params(&arch);
    out!();
    out!(
        "params: encoder {} decoder {} cross-attention {} embedding {}",
        counts.encoder, counts.decoder, counts.cross_attention, counts.embedding
    );
    for conv in ParamConvention::ALL {
        out!("{:<44} {:>16}", conv.to_string(), counts.total(conv));
    }
    if let Some(c) = ckpt {
        out!();
        out!("meta: {}", serde_json::to_string(c.meta())?);
        out!("content hash: {}", c.content_hash());
        for (name, t) in c.iter() {
            out!("{name:<32} {:?}", t.shape());
        }
    }
    Ok(())
}

/// Accepts either TOML lines or the body of an inline table (`a = 1, b = 2`).
fn parse_synthetic(text: &str) -> Result<SyntheticCorpus> {
    toml::from_str(text)
        .or_else(|_| {
            let mut doc: toml::Table = format!("v = {{ {text} }}").parse()?;
            doc.remove("v").expect("just parsed").try_into()
        })
        .context("parsing --synthetic")
}

fn prep_data(a: PrepArgs) -> Result<()> {
    if a.out.is_none() && a.text_out.is_none() {
        bail!("nothing to write: pass --out and/or --text-out");
    }
    let mut seqs = match (&a.corpus, &a.synthetic) {
        (Some(p), _) => read_corpus(p)?,
        (None, s) => {
            let spec: SyntheticCorpus = match s {
                Some(t) => parse_synthetic(t)?,
                None => SyntheticCorpus {
                    seed: a.seed,
                    ..Default::default()
                },
            };
            spec.generate()?
        }
    };
    if let Some(n) = a.chunk_len {
        seqs = adaptkit::datapipe::chunk_stream(&seqs, n);
    }
    if let Some(t) = &a.text_out {
        let text: String = seqs.iter().map(|s| render(s) + "\n").collect();
        if seqs.iter().flatten().any(|&t| t >= 256 || t == u32::from(b'\n')) {
            bail!("corpus contains tokens that do not round-trip through text");
        }
        atomic_write(t, text.as_bytes())?;
        out!("wrote {} sequences to {}", seqs.len(), t.display());
    }
    let Some(out) = &a.out else { return Ok(()) };
    seqs.retain(|s| s.len() >= 2);
    let mut examples = examples_from(seqs, a.objective, a.seed)?;
    if let Some(tp) = &a.teacher {
        if a.objective != ObjectiveArg::Prefixlm {
            bail!("teacher sidecars are only produced for the prefixlm objective");
        }
        let teacher = load(tp)?;
        let plain: Vec<PrefixLmExample> = examples
            .iter()
            .map(|e| PrefixLmExample {
                input: e.input().to_vec(),
                target: e.target().to_vec(),
                teacher_topk: None,
            })
            .collect();
        examples = teacher_record(&teacher, &plain, a.top_k)?
            .into_iter()
            .map(Into::into)
            .collect();
    }
    write_dataset(out, &examples)?;
    let mut inputs: Vec<&Path> = Vec::new();
    inputs.extend(a.corpus.as_deref());
    inputs.extend(a.teacher.as_deref());
    write_record(
        out,
        &json!({
            "objective": match a.objective { ObjectiveArg::Prefixlm => "prefixlm", ObjectiveArg::Ul2 => "ul2" },
            "synthetic": a.synthetic,
            "chunk_len": a.chunk_len,
            "top_k": a.teacher.as_ref().map(|_| a.top_k),
        }),
        &[("data", a.seed)],
        &inputs,
    )?;
    out!("wrote {} examples to {}", examples.len(), out.display());
    Ok(())
}
