//! Command-line front end for the retrieval pipeline.

use std::fs;
use std::io::{self, BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use infiniretri::analysis::{self, QaSample};
use infiniretri::attnkernel::{aggregate_heads, ToyModelSpec};
use infiniretri::cache::{self, CacheState};
use infiniretri::nih::{self, NeedleSetup};
use infiniretri::pipeline::{self, PipelineConfig, ProviderKind};
use infiniretri::provider::{
    self, AttentionProvider, LayerSel, PlantedOracle, PlantedOracleSpec, ProtocolClient, ProviderRequest, TargetSpan,
    ToyProvider,
};
use infiniretri::textseg::{build_chunks, segment_sentences};
use infiniretri::tokenizer::ByteTokenizer;

const PROVIDER_CMD_ENV: &str = "INFINIRETRI_PROVIDER_CMD";

#[derive(Parser, Debug)]
#[command(
    name = "infiniretri",
    version,
    about = "Attention-guided retrieval over long documents"
)]
struct Cli {
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    /// Print the resolved pipeline configuration and exit.
    #[arg(long, global = true)]
    show_config: bool,
    /// key=value file with pipeline settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Default)]
struct PipelineArgs {
    #[arg(long, global = true)]
    chunk_size: Option<String>,
    #[arg(long, global = true)]
    top_k: Option<String>,
    #[arg(long, global = true)]
    phrase_token_num: Option<String>,
    /// Layer index or `last`.
    #[arg(long, global = true)]
    layer: Option<String>,
    #[arg(long, global = true)]
    answer_budget: Option<String>,
    /// toy | oracle | proto
    #[arg(long, global = true)]
    provider: Option<String>,
    /// token-ids | kv-state
    #[arg(long, global = true)]
    cache_mode: Option<String>,
}

#[derive(Args, Debug, Default)]
struct BackendArgs {
    /// Adapter command for the proto provider (falls back to $INFINIRETRI_PROVIDER_CMD).
    #[arg(long, global = true, value_name = "CMD")]
    provider_cmd: Option<String>,
    /// Oracle target text; repeatable.
    #[arg(long = "target", global = true, value_name = "TEXT")]
    targets: Vec<String>,
    /// Seed for the toy model weights.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Toy model depth, or oracle layer count.
    #[arg(long, global = true)]
    layers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Answer a question over a document.
    Run(RunArgs),
    /// Needle-in-a-haystack grid.
    Nih(NihArgs),
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    #[command(subcommand)]
    Provider(ProviderCommand),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Document path, or `-` for stdin.
    #[arg(long, visible_alias = "doc")]
    document: PathBuf,
    #[arg(long)]
    question: String,
    /// Write the run trace as JSON.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    /// Write the final cache snapshot.
    #[arg(long, value_name = "FILE")]
    cache_snapshot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct NihArgs {
    /// Comma-separated document lengths in tokens.
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    /// Comma-separated needle depths in percent.
    #[arg(long, value_delimiter = ',', default_value = "0,10,20,30,40,50,60,70,80,90,100")]
    depths: Vec<f64>,
    #[arg(long, default_value = nih::DEFAULT_NEEDLE)]
    needle: String,
    #[arg(long, default_value = nih::DEFAULT_QUESTION)]
    question: String,
    #[arg(long, default_value = nih::DEFAULT_ANSWER)]
    answer: String,
    #[arg(long, default_value_t = 0)]
    filler_seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Grid CSV path; the heatmap SVG is written beside it.
    #[arg(long, default_value = "nih.csv")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCommand {
    /// Question-to-context attention of the first window as SVG and CSV.
    Heatmap(HeatmapArgs),
    /// Retrieval accuracy per layer on synthetic QA haystacks.
    Sweep(SweepArgs),
    /// Compare token-id and kv-state caches on synthetic QA haystacks.
    Ablation(AblationArgs),
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[arg(long, visible_alias = "doc")]
    document: PathBuf,
    #[arg(long)]
    question: String,
    #[arg(long, default_value = "attention.svg")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 4000)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
    /// Oracle layer where the planted signal peaks (oracle provider only).
    #[arg(long)]
    peak: Option<usize>,
    /// Oracle background jitter (oracle provider only). Without jitter every
    /// layer with a non-zero multiplier finds the answer and the sweep is flat.
    #[arg(long, default_value_t = 1000.0)]
    noise: f64,
}

#[derive(Args, Debug)]
struct AblationArgs {
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 3000)]
    length: usize,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Subcommand, Debug)]
enum ProviderCommand {
    /// Handshake with the provider and validate one attention reply.
    Check,
    /// Speak the wire protocol on stdin/stdout.
    Serve {
        #[arg(long, value_enum, default_value_t = Backend::Toy)]
        backend: Backend,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Backend {
    Toy,
    Oracle,
}

fn resolve_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        config.apply_key_values(&text)?;
    }
    let p = &cli.pipeline;
    for (key, value) in [
        ("chunk_size", &p.chunk_size),
        ("top_k", &p.top_k),
        ("phrase_token_num", &p.phrase_token_num),
        ("layer", &p.layer),
        ("answer_budget", &p.answer_budget),
        ("provider", &p.provider),
        ("cache_mode", &p.cache_mode),
    ] {
        if let Some(v) = value {
            config.set(key, v)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn toy_spec(backend: &BackendArgs) -> ToyModelSpec {
    let defaults = ToyModelSpec::default();
    ToyModelSpec {
        seed: backend.seed,
        layers: backend.layers.unwrap_or(defaults.layers),
        ..defaults
    }
}

fn oracle_spec(backend: &BackendArgs, extra_targets: &[String]) -> anyhow::Result<PlantedOracleSpec> {
    let targets = backend
        .targets
        .iter()
        .chain(extra_targets)
        .map(|t| TargetSpan::from_text(t, &ByteTokenizer, 1.0))
        .collect::<Result<Vec<_>, _>>()?;
    let defaults = PlantedOracleSpec::default();
    let layer_profile = match backend.layers {
        Some(n) => (1..=n).map(|l| l as f64 / n as f64).collect(),
        None => defaults.layer_profile.clone(),
    };
    Ok(PlantedOracleSpec {
        targets,
        layer_profile,
        seed: backend.seed,
        ..defaults
    })
}

fn build_provider(
    kind: ProviderKind,
    backend: &BackendArgs,
    extra_targets: &[String],
) -> anyhow::Result<Box<dyn AttentionProvider>> {
    Ok(match kind {
        ProviderKind::Toy => Box::new(ToyProvider::new(toy_spec(backend))?),
        ProviderKind::Oracle => Box::new(PlantedOracle::new(oracle_spec(backend, extra_targets)?)?),
        ProviderKind::Proto => {
            let cmd = match &backend.provider_cmd {
                Some(c) => c.clone(),
                None => std::env::var(PROVIDER_CMD_ENV)
                    .with_context(|| format!("proto provider needs --provider-cmd or ${PROVIDER_CMD_ENV}"))?,
            };
            Box::new(ProtocolClient::spawn(&cmd)?)
        }
    })
}

fn read_document(path: &Path) -> anyhow::Result<String> {
    if path == Path::new("-") {
        let mut text = String::new();
        io::stdin()
            .read_to_string(&mut text)
            .context("reading document from stdin")?;
        Ok(text)
    } else {
        fs::read_to_string(path).with_context(|| format!("reading document {}", path.display()))
    }
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_run(cli: &Cli, config: &PipelineConfig, args: &RunArgs) -> anyhow::Result<()> {
    let document = read_document(&args.document)?;
    let provider = build_provider(config.provider, &cli.backend, &[])?;
    let out = pipeline::run(provider.as_ref(), &document, &args.question, config)?;
    if let Some(path) = &args.trace {
        fs::write(path, out.trace.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.cache_snapshot {
        fs::write(path, out.cache.to_snapshot()).with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.json {
        print_json(&json!({ "answer": out.answer, "trace": out.trace }))?;
    } else {
        println!("{}", out.answer);
        eprintln!(
            "{} windows, {} forward passes, max window {} tokens of {} ({:.3}), cache {} sentences / {} tokens",
            out.trace.iterations.len(),
            out.trace.forward_passes,
            out.trace.max_merged_len,
            out.trace.document_tokens,
            out.trace.fed_ratio,
            out.cache.len(),
            out.cache.token_total()
        );
    }
    Ok(())
}

fn cmd_nih(cli: &Cli, config: &PipelineConfig, args: &NihArgs) -> anyhow::Result<()> {
    let provider = build_provider(config.provider, &cli.backend, std::slice::from_ref(&args.needle))?;
    let setup = NeedleSetup {
        needle: args.needle.clone(),
        question: args.question.clone(),
        expected_answer: args.answer.clone(),
        filler_seed: args.filler_seed,
    };
    let grid = nih::run_grid(
        provider.as_ref(),
        &setup,
        &args.lengths,
        &args.depths,
        config,
        args.jobs,
    )?;
    let (csv, svg) = nih::emit_heatmap(&grid, &args.out)?;
    let failed = grid.cells.iter().filter(|c| c.error.is_some()).count();
    if cli.json {
        print_json(&json!({
            "cells": grid.cells.len(),
            "recall": grid.recall(),
            "failed_cells": failed,
            "csv": csv,
            "svg": svg,
        }))?;
    } else {
        println!(
            "{} cells, recall {:.3}, {failed} failed; wrote {} and {}",
            grid.cells.len(),
            grid.recall(),
            csv.display(),
            svg.display()
        );
    }
    Ok(())
}

fn cmd_heatmap(cli: &Cli, config: &PipelineConfig, args: &HeatmapArgs) -> anyhow::Result<()> {
    let document = read_document(&args.document)?;
    let provider = build_provider(config.provider, &cli.backend, &[])?;
    let tokenizer = provider.tokenizer();
    let question = tokenizer.encode(&args.question)?;
    let sentences = segment_sentences(&document, tokenizer)?;
    let chunks = build_chunks(&sentences, config.chunk_size)?;
    let Some(first) = chunks.first() else {
        bail!(infiniretri::Error::Input("document has no sentences".into()));
    };
    let merged = cache::merge(&CacheState::new(), first, &question)?;
    let request = ProviderRequest::attention(merged.tokens.clone(), config.layer, merged.question_range.clone());
    let summed = aggregate_heads(&provider.get_attention(&request)?)?;
    let labels = analysis::token_labels(&merged.tokens, tokenizer)?;
    let query_labels = labels[merged.question_range.clone()].to_vec();
    analysis::export_attention_heatmap(&summed, &query_labels, &labels, &args.out)?;
    let csv = args.out.with_extension("csv");
    if cli.json {
        print_json(&json!({ "svg": args.out, "csv": csv, "queries": query_labels.len(), "keys": labels.len() }))?;
    } else {
        println!("wrote {} and {}", args.out.display(), csv.display());
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, config: &PipelineConfig, args: &SweepArgs) -> anyhow::Result<()> {
    let samples = analysis::synthetic_qa(args.samples, args.length, args.sample_seed, &ByteTokenizer)?;
    let provider: Box<dyn AttentionProvider> = match config.provider {
        ProviderKind::Oracle => {
            let layers = cli.backend.layers.unwrap_or(6);
            let layer_profile = PlantedOracleSpec::peaked_profile(layers, args.peak.unwrap_or(layers - 1));
            let spec = PlantedOracleSpec {
                targets: analysis::planted_targets(&samples, &ByteTokenizer)?,
                layer_profile,
                noise: args.noise,
                seed: cli.backend.seed,
                ..PlantedOracleSpec::default()
            };
            Box::new(PlantedOracle::new(spec)?)
        }
        kind => build_provider(kind, &cli.backend, &[])?,
    };
    let sweep = analysis::layer_sweep(provider.as_ref(), &samples, config)?;
    if cli.json {
        print_json(&serde_json::to_value(&sweep)?)?;
    } else {
        for l in &sweep.layers {
            println!(
                "layer {:>3}  accuracy {:.3}  ({}/{})",
                l.layer, l.accuracy, l.hits, sweep.evaluated
            );
        }
        println!("best layer {} ({} skipped)", sweep.best_layer, sweep.skipped);
    }
    Ok(())
}

fn cmd_ablation(cli: &Cli, config: &PipelineConfig, args: &AblationArgs) -> anyhow::Result<()> {
    let samples: Vec<QaSample> = analysis::synthetic_qa(args.samples, args.length, args.sample_seed, &ByteTokenizer)?;
    let provider = build_provider(config.provider, &cli.backend, &[])?;
    let report = analysis::cache_mode_ablation(provider.as_ref(), &samples, config)?;
    if cli.json {
        print_json(&serde_json::to_value(&report)?)?;
    } else {
        for m in &report.modes {
            println!(
                "{:<10} recall {:.3}  answer match {:.3}  errors {}",
                m.cache_mode.to_string(),
                m.recall,
                m.mean_answer_match,
                m.errors
            );
        }
    }
    Ok(())
}

fn cmd_check(cli: &Cli, config: &PipelineConfig) -> anyhow::Result<()> {
    let provider = build_provider(config.provider, &cli.backend, &[])?;
    let info = provider.info();
    let tokens = provider.tokenizer().encode("Check the provider. Does it attend?")?;
    let n = tokens.len();
    let q = n.saturating_sub(4)..n;
    let tensor = provider.get_attention(&ProviderRequest::attention(tokens, LayerSel::Last, q.clone()))?;
    if tensor.query_range() != q || tensor.n_keys() != n {
        bail!(infiniretri::Error::Protocol(format!(
            "reply covers queries {:?} over {} keys, asked for {q:?} over {n}",
            tensor.query_range(),
            tensor.n_keys()
        )));
    }
    tensor.validate(infiniretri::attnkernel::ROW_SUM_TOLERANCE)?;
    if cli.json {
        print_json(&json!({
            "provider": provider.name(),
            "vocab_size": info.vocab_size,
            "layers": info.layers,
            "max_window": info.max_window,
            "heads": tensor.num_heads(),
            "ok": true,
        }))?;
    } else {
        println!(
            "{}: vocab {} layers {} window {} heads {} ok",
            provider.name(),
            info.vocab_size,
            info.layers,
            info.max_window,
            tensor.num_heads()
        );
    }
    Ok(())
}

fn cmd_serve(cli: &Cli, backend: Backend) -> anyhow::Result<()> {
    let provider: Box<dyn AttentionProvider> = match backend {
        Backend::Toy => Box::new(ToyProvider::new(toy_spec(&cli.backend))?),
        Backend::Oracle => Box::new(PlantedOracle::new(oracle_spec(&cli.backend, &[])?)?),
    };
    let stdin = io::stdin();
    provider::serve(provider.as_ref(), BufReader::new(stdin.lock()), io::stdout().lock())?;
    Ok(())
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let config = resolve_config(cli)?;
    if cli.show_config {
        if cli.json {
            print_json(&serde_json::to_value(&config)?)?;
        } else {
            print!("{}", config.to_key_values());
        }
        return Ok(());
    }
    let Some(command) = &cli.command else {
        bail!(infiniretri::Error::Input("no subcommand given (try --help)".into()));
    };
    match command {
        Command::Run(args) => cmd_run(cli, &config, args),
        Command::Nih(args) => cmd_nih(cli, &config, args),
        Command::Analyze(AnalyzeCommand::Heatmap(args)) => cmd_heatmap(cli, &config, args),
        Command::Analyze(AnalyzeCommand::Sweep(args)) => cmd_sweep(cli, &config, args),
        Command::Analyze(AnalyzeCommand::Ablation(args)) => cmd_ablation(cli, &config, args),
        Command::Provider(ProviderCommand::Check) => cmd_check(cli, &config),
        Command::Provider(ProviderCommand::Serve { backend }) => cmd_serve(cli, *backend),
    }
}

/// 2 for provider failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    let provider_side = err
        .chain()
        .filter_map(|e| e.downcast_ref::<infiniretri::Error>())
        .any(infiniretri::Error::is_provider_error);
    if provider_side {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
