//! `tabrag` command line: ingest, query, eval and mock-serve.
//!
//! Exit codes: 0 success, 1 degraded pipeline result, 2 usage or configuration error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::config::{Config, EmbedderKind};
use crate::eval::{
    load_qa, run_generation_eval, run_retrieval_eval, ContextMode, EvalError, GenerationEvalConfig, GenerationMetric,
    GenerationModels,
};
use crate::extraction::FallbackPolicy;
use crate::gateway::mock::{serve_until_signal, MockConfig};
use crate::gateway::{ChatModel, GatewayClient, Role};
use crate::rag::{answer, ingest, AnswerError, CorpusManifest, IngestConfig, IngestModels};
use crate::rationale::TableRewrite;
use crate::store::{retrieve_top_k, Embedder, GatewayEmbedder, HashingEmbedder, RagStore, RetrievalHit, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DEGRADED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tabrag", version, about = "Table-aware retrieval-augmented generation over page images")]
pub struct Cli {
    /// TOML config file; TABRAG_* environment variables and flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a store from a page manifest.
    Ingest(IngestArgs),
    /// Answer a question from a store.
    Query(QueryArgs),
    /// Score generation or retrieval against a QA file.
    Eval(EvalArgs),
    /// Run the mock model gateway until interrupted.
    MockServe(MockServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output store (JSONL).
    #[arg(long)]
    pub store: PathBuf,
    /// Ingest report path; defaults to `<store>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub policy: Option<FallbackPolicy>,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long = "rationale-mode", value_enum)]
    pub rationale_mode: Option<TableRewrite>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Validate inputs and print the plan without calling any model or writing files.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, short)]
    pub question: String,
    #[arg(long)]
    pub k: Option<usize>,
    /// Defaults to the embedder recorded in the store.
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    /// Print hits without calling the language model.
    #[arg(long)]
    pub retrieve_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Generation,
    Retrieval,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: EvalMode,
    #[arg(long)]
    pub store: PathBuf,
    /// JSONL of {"question","answers","doc_id","page_index"}.
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum, default_value_t = ContextMode::GoldPage)]
    pub context: ContextMode,
    #[arg(long, value_enum, default_value_t = GenerationMetric::Accuracy)]
    pub metric: GenerationMetric,
    /// Pages per retrieval partition; 0 searches the whole store.
    #[arg(long)]
    pub partition_size: Option<usize>,
    #[arg(long, value_enum)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// Directory with fixtures.json and/or <key>.txt files.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub port: u16,
}

/// A failure carrying its exit code.
#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, message: e.to_string() }
}

fn degraded(e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_DEGRADED, message: e.to_string() }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    let json = cli.json;
    match execute(cli) {
        Ok(code) => code,
        Err(f) => {
            if json {
                println!("{}", json!({ "error": f.message, "exit_code": f.code }));
            } else {
                eprintln!("error: {}", f.message);
            }
            f.code
        }
    }
}

fn execute(cli: Cli) -> Result<i32, Failure> {
    if let Command::MockServe(args) = &cli.command {
        return mock_serve(args, cli.json);
    }
    let mut config = match &cli.config {
        Some(path) => Config::load(path).map_err(usage)?,
        None => Config::default(),
    };
    config.apply_env(|k| std::env::var(k).ok());
    match cli.command {
        Command::Ingest(args) => cmd_ingest(&config, &args, cli.json),
        Command::Query(args) => cmd_query(&config, &args, cli.json),
        Command::Eval(args) => cmd_eval(&config, &args, cli.json),
        Command::MockServe(_) => unreachable!(),
    }
}

fn client(config: &Config, role: Role) -> Result<GatewayClient, Failure> {
    let endpoint = config.endpoint(role).map_err(usage)?;
    GatewayClient::new(endpoint).map_err(usage)
}

fn make_embedder(config: &Config, kind: EmbedderKind, dims: usize) -> Result<Box<dyn Embedder>, Failure> {
    Ok(match kind {
        EmbedderKind::Hashing => Box::new(HashingEmbedder { dims }),
        EmbedderKind::Gateway => Box::new(GatewayEmbedder::new(Arc::new(client(config, Role::Embedder)?))),
    })
}

/// The flag if given, otherwise whatever built the store.
fn store_embedder(config: &Config, store: &RagStore, flag: Option<EmbedderKind>) -> Result<Box<dyn Embedder>, Failure> {
    let kind = flag.unwrap_or(if store.embedder().starts_with("gateway:") { EmbedderKind::Gateway } else { EmbedderKind::Hashing });
    make_embedder(config, kind, store.dims())
}

fn load_store(path: &Path) -> Result<RagStore, Failure> {
    if !path.exists() {
        return Err(usage(format!("store {} does not exist", path.display())));
    }
    RagStore::load(path).map_err(usage)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn cmd_ingest(config: &Config, args: &IngestArgs, json_out: bool) -> Result<i32, Failure> {
    let manifest = CorpusManifest::load(&args.manifest).map_err(usage)?;
    let provider = config.layout_provider().map_err(usage)?;
    let p = &config.pipeline;
    let ingest_config = IngestConfig {
        policy: args.policy.unwrap_or(p.policy),
        rewrite: args.rationale_mode.unwrap_or(p.rationale),
        workers: args.workers.unwrap_or(p.workers).max(1),
        grouping: config.grouping(),
    };
    let embedder_kind = args.embedder.unwrap_or(p.embedder);
    for role in [Some(Role::Vlm), (ingest_config.rewrite == TableRewrite::Model).then_some(Role::Llm), (embedder_kind == EmbedderKind::Gateway).then_some(Role::Embedder)].into_iter().flatten() {
        config.endpoint(role).map_err(usage)?;
    }
    let report_path = args.report.clone().unwrap_or_else(|| {
        let mut s = args.store.clone().into_os_string();
        s.push(".report.json");
        PathBuf::from(s)
    });

    if args.dry_run {
        let plan = json!({
            "dry_run": true,
            "pages": manifest.pages.len(),
            "layout": provider,
            "policy": ingest_config.policy,
            "rationale_mode": ingest_config.rewrite,
            "embedder": embedder_kind,
            "workers": ingest_config.workers,
            "store": args.store,
            "report": report_path,
        });
        if json_out {
            print_json(&plan);
        } else {
            println!(
                "would ingest {} pages with {:?} layout, {:?} fallback, {:?} table rewrite, {:?} embedder, {} workers into {}",
                manifest.pages.len(),
                config.layout.provider,
                ingest_config.policy,
                ingest_config.rewrite,
                embedder_kind,
                ingest_config.workers,
                args.store.display()
            );
        }
        return Ok(EXIT_OK);
    }

    let vlm = client(config, Role::Vlm)?;
    let llm = match ingest_config.rewrite {
        TableRewrite::Model => Some(client(config, Role::Llm)?),
        TableRewrite::Template => None,
    };
    let embedder = make_embedder(config, embedder_kind, p.dims)?;
    let models = IngestModels { vlm: &vlm, llm: llm.as_ref().map(|c| c as &dyn ChatModel), embedder: embedder.as_ref() };
    let (store, report) = match ingest(&manifest, &provider, &models, &ingest_config) {
        Ok(r) => r,
        Err(crate::rag::RagError::Store(e @ StoreError::Embedding { .. })) => return Err(degraded(e)),
        Err(crate::rag::RagError::Store(e)) => return Err(degraded(e)),
        Err(e) => return Err(usage(e)),
    };
    let report_json = serde_json::to_value(&report).expect("report serializes");
    if !store.is_empty() {
        store.persist(&args.store).map_err(degraded)?;
    }
    std::fs::write(&report_path, serde_json::to_string_pretty(&report_json).expect("json value serializes"))
        .map_err(|e| degraded(format!("cannot write report {}: {e}", report_path.display())))?;
    if json_out {
        print_json(&report_json);
    } else {
        println!(
            "{} of {} pages ok, {} regions extracted, {} fallbacks, {} records written to {}",
            report.pages_ok,
            report.pages_total,
            report.regions_extracted,
            report.fallbacks_used,
            report.records,
            args.store.display()
        );
        for f in &report.pages_failed {
            println!("  failed {}_p{}: {}", f.doc_id, f.page_index, f.reason);
        }
    }
    Ok(if report.records >= 1 { EXIT_OK } else { EXIT_DEGRADED })
}

fn hits_json(store: &RagStore, hits: &[RetrievalHit]) -> serde_json::Value {
    hits.iter()
        .map(|h| {
            let page = store.page_of(&h.record_id);
            json!({
                "rank": h.rank,
                "record_id": h.record_id,
                "score": h.score,
                "doc_id": page.map(|p| p.doc_id.as_str()),
                "page_index": page.map(|p| p.page_index),
                "text": store.get(&h.record_id).map(|r| r.rationale.text.as_str()),
            })
        })
        .collect()
}

fn print_hits(store: &RagStore, hits: &[RetrievalHit]) {
    for h in hits {
        let text = store.get(&h.record_id).map(|r| r.rationale.text.as_str()).unwrap_or_default();
        let first_line = text.lines().next().unwrap_or_default();
        println!("{:>3}  {:.4}  {}  {}", h.rank, h.score, h.record_id, first_line);
    }
}

fn cmd_query(config: &Config, args: &QueryArgs, json_out: bool) -> Result<i32, Failure> {
    let store = load_store(&args.store)?;
    let embedder = store_embedder(config, &store, args.embedder)?;
    let k = args.k.unwrap_or(config.pipeline.k);
    if args.retrieve_only {
        let hits = retrieve_top_k(&args.question, &store, k, embedder.as_ref()).map_err(usage)?;
        if json_out {
            print_json(&json!({ "question": args.question, "hits": hits_json(&store, &hits) }));
        } else {
            print_hits(&store, &hits);
        }
        return Ok(EXIT_OK);
    }
    let llm = client(config, Role::Llm)?;
    match answer(&args.question, &store, k, &llm, embedder.as_ref()) {
        Ok(a) => {
            if json_out {
                print_json(&json!({ "question": args.question, "answer": a.text, "hits": hits_json(&store, &a.hits) }));
            } else {
                println!("{}", a.text);
                println!();
                print_hits(&store, &a.hits);
            }
            Ok(EXIT_OK)
        }
        Err(AnswerError::Retrieval(e)) => Err(usage(e)),
        Err(AnswerError::AnswerUnavailable { hits, source }) => {
            if json_out {
                print_json(&json!({
                    "question": args.question,
                    "answer": null,
                    "error": source.to_string(),
                    "hits": hits_json(&store, &hits),
                }));
            } else {
                eprintln!("answer unavailable: {source}");
                print_hits(&store, &hits);
            }
            Ok(EXIT_DEGRADED)
        }
    }
}

fn cmd_eval(config: &Config, args: &EvalArgs, json_out: bool) -> Result<i32, Failure> {
    let store = load_store(&args.store)?;
    let items = load_qa(&args.qa).map_err(usage)?;
    let k = args.k.unwrap_or(config.pipeline.k);
    let partition_size = args.partition_size.unwrap_or(config.pipeline.partition_size);
    let report = match args.mode {
        EvalMode::Retrieval => {
            let embedder = store_embedder(config, &store, args.embedder)?;
            run_retrieval_eval(&store, &items, k, partition_size, embedder.as_ref())
        }
        EvalMode::Generation => {
            let llm = client(config, Role::Llm)?;
            let judge = match args.metric {
                GenerationMetric::L3score => Some(client(config, Role::Judge)?),
                GenerationMetric::Accuracy => None,
            };
            let embedder = match args.context {
                ContextMode::Retrieval => Some(store_embedder(config, &store, args.embedder)?),
                ContextMode::GoldPage => None,
            };
            let models = GenerationModels {
                llm: &llm,
                judge: judge.as_ref().map(|j| j as &dyn ChatModel),
                embedder: embedder.as_deref(),
            };
            let eval_config = GenerationEvalConfig {
                context: args.context,
                metric: args.metric,
                k,
                partition_size,
                workers: args.workers.unwrap_or(config.pipeline.workers).max(1),
            };
            run_generation_eval(&store, &items, &models, &eval_config)
        }
    };
    let report = match report {
        Ok(r) => r,
        Err(e @ (EvalError::QaFile { .. } | EvalError::Pool(_) | EvalError::JudgeUnsupported)) => return Err(usage(e)),
        Err(EvalError::Store(e @ StoreError::StoreMismatch { .. })) => return Err(usage(e)),
        Err(e) => return Err(degraded(e)),
    };
    if json_out {
        print_json(&report.to_json());
    } else {
        println!("{} = {:.4} (stderr {:.4}, n = {})", report.metric, report.value, report.stderr, report.n);
        for s in &report.skipped {
            println!("  skipped item {}: {}", s.index, s.reason);
        }
    }
    Ok(if report.skipped.is_empty() { EXIT_OK } else { EXIT_DEGRADED })
}

fn mock_serve(args: &MockServeArgs, json_out: bool) -> Result<i32, Failure> {
    let config = match &args.fixtures {
        Some(dir) => MockConfig::from_dir(dir).map_err(usage)?,
        None => MockConfig::default(),
    };
    serve_until_signal(config, args.port, |addr| {
        if json_out {
            println!("{}", json!({ "listening": format!("http://{addr}") }));
        } else {
            println!("mock gateway listening on http://{addr}");
        }
    })
    .map_err(usage)?;
    Ok(EXIT_OK)
}
