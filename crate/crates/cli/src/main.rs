use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use edgeasr::audio::{estimate_stnr, ingest, AudioClip};
use edgeasr::bench::{
    bench_suite, BenchConfig, BenchSummary, BundleEngine, Engine, SleepStub, SysfsProvider, TelemetryProvider,
};
use edgeasr::compress::{collect_calibration, compress_bundle, CompressionMode, CompressionPolicy};
use edgeasr::filter::{read_manifest, run_pipeline, write_manifest, DataVersion, FileProbe, FilterConfig, FilterError};
use edgeasr::flops::flops_model_with;
use edgeasr::model::{
    load_bundle, save_bundle, transcribe, ByteTokenizer, LinearKind, ModelBundle, ModelConfig, Tokenizer,
    VocabTokenizer,
};
use edgeasr::tensor::FlopCounter;
use edgeasr::wer::{corpus_wer, pair_by_id, read_jsonl_pairs, read_tsv};

/// Marks an error as caused by bad input or usage (exit code 2).
#[derive(Debug)]
struct Invalid(anyhow::Error);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    anyhow::Error::new(Invalid(e.into()))
}

trait OrInvalid<T> {
    fn or_invalid(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrInvalid<T> for std::result::Result<T, E> {
    fn or_invalid(self) -> Result<T> {
        self.map_err(invalid)
    }
}

#[derive(Parser, Debug)]
#[command(name = "edgeasr", version, about = "On-device speech recognition toolkit")]
struct Cli {
    /// JSON config file; explicit flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice (calibration subsampling, initialisation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for auxiliary outputs (reports, CSVs).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and pack an utterance manifest.
    Filter(FilterArgs),
    /// Transcribe audio files; one JSON line per file.
    Transcribe(TranscribeArgs),
    /// Replace encoder linear layers with low-rank factors.
    Compress(CompressArgs),
    /// Analytic FLOP count for one utterance.
    Flops(FlopsArgs),
    /// Latency / RTF benchmark with telemetry.
    Bench(BenchArgs),
    /// Score hypotheses against references.
    Wer(WerArgs),
    /// Speech-to-noise ratio of audio files.
    Stnr(StnrArgs),
    /// Write a randomly initialised model bundle.
    Init(InitArgs),
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Data version: A (discards only), B (+F1, F2), C (+F3), D (+F1, F2, F3).
    #[arg(long, value_parser = parse_version)]
    version: Option<DataVersion>,
    /// TSV `utt_id<TAB>hypothesis` of reference-model outputs used by F1.
    #[arg(long)]
    refs: Option<PathBuf>,
    /// Output manifest (JSONL).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    wer_threshold: Option<f64>,
    #[arg(long)]
    min_words: Option<usize>,
}

fn parse_version(s: &str) -> std::result::Result<DataVersion, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct TranscribeArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Vocabulary JSON; defaults to the byte tokenizer.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    max_tokens: Option<usize>,
    #[arg(required = true)]
    audio: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    WeightSvd,
    ActivationSvd,
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Output bundle path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    theta: Option<f64>,
    /// Maximum number of calibration clips.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Comma-separated layer kinds (attn_q,attn_k,attn_v,attn_out,mlp_fc1,mlp_fc2).
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    /// Manifest (JSONL) whose audio files are used for calibration.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Calibration audio files.
    #[arg(long, num_args = 1..)]
    calib_audio: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Number of decoded tokens.
    #[arg(long, default_value_t = 0)]
    tokens: usize,
    #[arg(long, default_value_t = 1)]
    prompt_len: usize,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Model bundles; each becomes one benchmark row.
    #[arg(long, num_args = 1..)]
    bundle: Vec<PathBuf>,
    /// Benchmark a model that only sleeps this many milliseconds.
    #[arg(long)]
    stub_ms: Option<u64>,
    #[arg(long, num_args = 1.., required = true)]
    audio: Vec<PathBuf>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Telemetry sampling period in seconds.
    #[arg(long)]
    period: Option<f64>,
    #[arg(long)]
    no_telemetry: bool,
    /// meminfo-style file (default /proc/meminfo, or $EDGEASR_MEMINFO).
    #[arg(long)]
    meminfo: Option<PathBuf>,
    /// Thermal sensor file in millidegrees (default thermal_zone0, or $EDGEASR_THERMAL).
    #[arg(long)]
    thermal: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct WerArgs {
    /// TSV `id<TAB>text` references.
    #[arg(long = "ref", requires = "hyp", conflicts_with = "pairs")]
    reference: Option<PathBuf>,
    #[arg(long, requires = "reference")]
    hyp: Option<PathBuf>,
    /// JSONL with `id`, `ref` and `hyp` per line.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StnrArgs {
    #[arg(required = true)]
    audio: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Shape {
    Tiny,
    Toy,
}

#[derive(Args, Debug)]
struct InitArgs {
    #[arg(long, value_enum, default_value_t = Shape::Toy)]
    shape: Shape,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    max_tokens: Option<usize>,
    filter: Option<FilterConfig>,
    compress: Option<CompressionPolicy>,
    bench: Option<BenchFile>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    runs: Option<usize>,
    period_s: Option<f64>,
}

struct Ctx {
    file: FileConfig,
    seed: u64,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn max_tokens(&self, flag: Option<usize>) -> usize {
        flag.or(self.file.max_tokens).unwrap_or(edgeasr::bench::DEFAULT_MAX_TOKENS)
    }

    /// Explicit budgets must fit the text context; the default is clipped to it.
    fn max_tokens_for(&self, flag: Option<usize>, bundle: &ModelBundle) -> Result<usize> {
        let n_ctx = bundle.config.n_text_ctx;
        match flag.or(self.file.max_tokens) {
            Some(n) if n > n_ctx => Err(invalid(anyhow::anyhow!("max_tokens {n} exceeds the {n_ctx}-token text context"))),
            Some(n) => Ok(n),
            None => Ok(edgeasr::bench::DEFAULT_MAX_TOKENS.min(n_ctx)),
        }
    }

    fn write_aux(&self, name: &str, contents: &str) -> Result<()> {
        if let Some(dir) = &self.out_dir {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join(name);
            std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        }
        Ok(())
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .or_invalid()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .or_invalid()
}

fn load(path: &Path) -> Result<ModelBundle> {
    load_bundle(path)
        .with_context(|| format!("loading bundle {}", path.display()))
        .or_invalid()
}

fn read_audio(path: &Path) -> Result<AudioClip> {
    ingest(path).with_context(|| format!("reading audio {}", path.display())).or_invalid()
}

fn utt_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn emit(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}")?;
    Ok(())
}

fn cmd_filter(ctx: &Ctx, a: &FilterArgs) -> Result<()> {
    let mut cfg = ctx.file.filter.clone().unwrap_or_default();
    if let Some(v) = a.version {
        let preset = FilterConfig::for_version(v);
        cfg.apply_f1 = preset.apply_f1;
        cfg.apply_f2 = preset.apply_f2;
        cfg.apply_f3 = preset.apply_f3;
    }
    if let Some(t) = a.wer_threshold {
        cfg.wer_threshold = t;
    }
    if let Some(n) = a.min_words {
        cfg.min_words = n;
    }
    let mut manifest = read_manifest(&a.manifest)
        .with_context(|| format!("reading manifest {}", a.manifest.display()))
        .or_invalid()?;
    if let Some(refs) = &a.refs {
        let table: std::collections::HashMap<String, String> = read_tsv(refs)
            .with_context(|| format!("reading refs {}", refs.display()))
            .or_invalid()?
            .into_iter()
            .collect();
        for r in &mut manifest {
            if let Some(h) = table.get(&r.utt_id) {
                r.ref_hyp = Some(h.clone());
            }
        }
    }
    let (out, report) = match run_pipeline(&manifest, &cfg, &FileProbe) {
        Ok(x) => x,
        Err(FilterError::Io(e)) => return Err(e.into()),
        Err(e) => return Err(invalid(e)),
    };
    write_manifest(&a.out, &out).with_context(|| format!("writing {}", a.out.display()))?;
    ctx.write_aux("filter_report.json", &report.to_json())?;
    ctx.write_aux("filter_table.txt", &report.to_table())?;
    eprint!("{}", report.to_table());
    emit(&report.to_json())
}

fn tokenizer_for(bundle: &ModelBundle, vocab: Option<&Path>) -> Result<Box<dyn Tokenizer>> {
    Ok(match vocab {
        Some(p) => {
            let t = VocabTokenizer::from_json_file(p)
                .with_context(|| format!("loading vocabulary {}", p.display()))
                .or_invalid()?;
            if t.n_vocab() != bundle.config.n_vocab {
                return Err(invalid(anyhow::anyhow!(
                    "vocabulary has {} tokens but the bundle expects {}",
                    t.n_vocab(),
                    bundle.config.n_vocab
                )));
            }
            Box::new(t)
        }
        None => Box::new(ByteTokenizer::new(bundle.config.n_vocab)),
    })
}

fn cmd_transcribe(ctx: &Ctx, a: &TranscribeArgs) -> Result<()> {
    let bundle = load(&a.bundle)?;
    let tok = tokenizer_for(&bundle, a.vocab.as_deref())?;
    let max_tokens = ctx.max_tokens_for(a.max_tokens, &bundle)?;
    for path in &a.audio {
        let clip = read_audio(path)?;
        let start = Instant::now();
        let t = transcribe(&bundle, &clip, tok.as_ref(), max_tokens, &mut FlopCounter::new())?;
        let latency = start.elapsed().as_secs_f64();
        emit(&serde_json::to_string(&json!({
            "schema_version": 1,
            "utt": utt_name(path),
            "text": t.text,
            "tokens": t.token_ids,
            "n_decoded_tokens": t.n_decoded_tokens,
            "latency_s": latency,
        }))?)?;
    }
    Ok(())
}

fn parse_kind(s: &str) -> Result<LinearKind> {
    LinearKind::ALL
        .into_iter()
        .find(|k| k.as_str() == s.trim())
        .ok_or_else(|| invalid(anyhow::anyhow!("unknown layer kind {s:?}")))
}

fn cmd_compress(ctx: &Ctx, a: &CompressArgs) -> Result<()> {
    let mut policy = ctx.file.compress.clone().unwrap_or_default();
    if let Some(t) = a.theta {
        policy.threshold_theta = t;
    }
    if let Some(n) = a.samples {
        policy.calibration_samples = n;
    }
    if let Some(m) = a.mode {
        policy.mode = match m {
            ModeArg::WeightSvd => CompressionMode::WeightSvd,
            ModeArg::ActivationSvd => CompressionMode::ActivationSvd,
        };
    }
    if let Some(kinds) = &a.kinds {
        policy.target_kinds = kinds.iter().map(|k| parse_kind(k)).collect::<Result<_>>()?;
    }
    policy.seed = ctx.seed;
    policy.validate().or_invalid()?;
    let bundle = load(&a.bundle)?;

    let calib = if policy.mode == CompressionMode::ActivationSvd {
        let mut paths = a.calib_audio.clone();
        if let Some(m) = &a.calib {
            let records = read_manifest(m)
                .with_context(|| format!("reading calibration manifest {}", m.display()))
                .or_invalid()?;
            paths.extend(records.into_iter().filter(|r| r.sources.is_empty()).map(|r| r.audio_path));
        }
        if paths.is_empty() {
            return Err(invalid(anyhow::anyhow!(
                "activation-svd needs calibration audio (--calib or --calib-audio)"
            )));
        }
        if paths.len() > policy.calibration_samples {
            let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
            let mut idx = rand::seq::index::sample(&mut rng, paths.len(), policy.calibration_samples).into_vec();
            idx.sort_unstable();
            paths = idx.into_iter().map(|i| paths[i].clone()).collect();
        }
        let clips = paths.iter().map(|p| read_audio(p)).collect::<Result<Vec<_>>>()?;
        Some(collect_calibration(&bundle, &clips, &policy)?)
    } else {
        None
    };
    let (out, report) = compress_bundle(&bundle, calib.as_ref(), &policy)?;
    save_bundle(&out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    ctx.write_aux("compression_report.json", &report.to_json())?;
    eprint!("{}", report.to_table());
    emit(&report.to_json())
}

fn cmd_flops(ctx: &Ctx, a: &FlopsArgs) -> Result<()> {
    let bundle = load(&a.bundle)?;
    if a.prompt_len == 0 || a.prompt_len + a.tokens > bundle.config.n_text_ctx + 1 {
        return Err(invalid(anyhow::anyhow!(
            "prompt_len {} + tokens {} does not fit a {}-token context",
            a.prompt_len,
            a.tokens,
            bundle.config.n_text_ctx
        )));
    }
    let report = flops_model_with(&bundle, a.tokens, a.prompt_len);
    ctx.write_aux("flops_breakdown.csv", &report.breakdown_csv())?;
    emit(&report.to_json())
}

fn write_bench_outputs(ctx: &Ctx, s: &BenchSummary) -> Result<()> {
    ctx.write_aux("bench_summary.json", &s.to_json())?;
    ctx.write_aux("bench_records.csv", &s.records_csv())?;
    ctx.write_aux("telemetry.csv", &s.telemetry.to_csv())
}

fn cmd_bench(ctx: &Ctx, a: &BenchArgs) -> Result<()> {
    let bf = ctx.file.bench.as_ref();
    let cfg = BenchConfig {
        n_runs: a.runs.or(bf.and_then(|b| b.runs)).unwrap_or(edgeasr::bench::DEFAULT_RUNS),
        max_tokens: ctx.max_tokens(a.max_tokens),
        telemetry_period_s: a
            .period
            .or(bf.and_then(|b| b.period_s))
            .unwrap_or(edgeasr::bench::DEFAULT_PERIOD_S),
    };
    if cfg.n_runs == 0 {
        return Err(invalid(anyhow::anyhow!("--runs must be at least 1")));
    }
    if !(cfg.telemetry_period_s > 0.0) {
        return Err(invalid(anyhow::anyhow!("--period must be positive")));
    }
    let mut engines: Vec<Box<dyn Engine>> = Vec::new();
    for p in &a.bundle {
        engines.push(Box::new(BundleEngine::new(utt_name(p), load(p)?)));
    }
    if let Some(ms) = a.stub_ms {
        engines.push(Box::new(SleepStub::new(Duration::from_millis(ms))));
    }
    if engines.is_empty() {
        return Err(invalid(anyhow::anyhow!("give at least one --bundle or --stub-ms")));
    }
    let clips = a
        .audio
        .iter()
        .map(|p| Ok((utt_name(p), read_audio(p)?)))
        .collect::<Result<Vec<_>>>()?;
    let provider: Option<Box<dyn TelemetryProvider>> = if a.no_telemetry {
        None
    } else {
        let mut p = SysfsProvider::from_env();
        if let Some(m) = &a.meminfo {
            p.meminfo = m.clone();
        }
        if let Some(t) = &a.thermal {
            p.thermal = t.clone();
        }
        Some(Box::new(p))
    };
    let refs: Vec<&dyn Engine> = engines.iter().map(|e| e.as_ref()).collect();
    let summary = bench_suite(&refs, &clips, &cfg, provider)?;
    write_bench_outputs(ctx, &summary)?;
    emit(&summary.to_json())
}

fn cmd_wer(ctx: &Ctx, a: &WerArgs) -> Result<()> {
    let pairs = match (&a.reference, &a.hyp, &a.pairs) {
        (Some(r), Some(h), None) => {
            let refs = read_tsv(r).with_context(|| format!("reading {}", r.display())).or_invalid()?;
            let hyps = read_tsv(h).with_context(|| format!("reading {}", h.display())).or_invalid()?;
            pair_by_id(refs, hyps).or_invalid()?
        }
        (None, None, Some(p)) => read_jsonl_pairs(p).with_context(|| format!("reading {}", p.display())).or_invalid()?,
        _ => return Err(invalid(anyhow::anyhow!("give either --ref and --hyp, or --pairs"))),
    };
    let score = corpus_wer(&pairs).or_invalid()?;
    ctx.write_aux("wer_utterances.csv", &score.utterances_csv())?;
    emit(&score.to_json())
}

fn cmd_stnr(_ctx: &Ctx, a: &StnrArgs) -> Result<()> {
    for path in &a.audio {
        let clip = read_audio(path)?;
        let line = match estimate_stnr(&clip) {
            Ok(e) => json!({
                "schema_version": 1,
                "utt": utt_name(path),
                "stnr_db": e.stnr_db,
                "speech_level_db": e.speech_level_db,
                "noise_level_db": e.noise_level_db,
            }),
            Err(e) => json!({ "schema_version": 1, "utt": utt_name(path), "error": e.to_string() }),
        };
        emit(&serde_json::to_string(&line)?)?;
    }
    Ok(())
}

fn cmd_init(ctx: &Ctx, a: &InitArgs) -> Result<()> {
    let cfg = match a.shape {
        Shape::Tiny => ModelConfig::tiny_en(),
        Shape::Toy => ModelConfig::toy(a.layers, a.d_model, a.heads),
    };
    let bundle = ModelBundle::random(cfg, ctx.seed).or_invalid()?;
    save_bundle(&bundle, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let params = bundle.param_count();
    emit(&serde_json::to_string(&json!({
        "schema_version": 1,
        "config": bundle.config,
        "params": params,
    }))?)
}

fn run(cli: Cli) -> Result<()> {
    let file = load_config(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        out_dir: cli.out_dir.clone().or_else(|| file.out_dir.clone()),
        file,
    };
    match &cli.command {
        Command::Filter(a) => cmd_filter(&ctx, a),
        Command::Transcribe(a) => cmd_transcribe(&ctx, a),
        Command::Compress(a) => cmd_compress(&ctx, a),
        Command::Flops(a) => cmd_flops(&ctx, a),
        Command::Bench(a) => cmd_bench(&ctx, a),
        Command::Wer(a) => cmd_wer(&ctx, a),
        Command::Stnr(a) => cmd_stnr(&ctx, a),
        Command::Init(a) => cmd_init(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.chain().any(|c| c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)) => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Invalid>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
