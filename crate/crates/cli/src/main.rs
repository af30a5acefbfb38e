mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use demo_forge::corpus::{load_corpus, load_demonstrations, write_jsonl, CorpusError};
use demo_forge::digest::config_digest;
use demo_forge::harvest::{harvest, HarvestConfig};
use demo_forge::infer::{evaluate, write_results, InferenceConfig, ShotSelection};
use demo_forge::llm::{
    Backend, BoundedBackend, HttpBackend, HttpConfig, LoggingBackend, ParametricConfig, ParametricMock,
    RetryPolicy, Script, ScriptedMock,
};
use demo_forge::promptkit::{PromptStyle, ShotPool};
use demo_forge::pyexec::{SidecarCommand, SidecarPool};
use demo_forge::refine::{refine, OneShotResult, RefineConfig};
use demo_forge::runtime::default_parallelism;
use demo_forge::similarity::{good_shot_distribution, Embedder, HttpEmbedder, KnnIndex, KnnRanking, MockEmbedder};
use demo_forge::stage::{Env, IssueStats, PipelineError};
use demo_forge::stats::{self, KNN_RANKS};
use demo_forge::store::{read_pool, scan, write_records, Appender, RunDir, StoreError};
use demo_forge::synth::{World, WorldConfig};
use demo_forge::verify::ProgramExecutor;
use demo_forge::{LanguageTag, Sample};

use config::{resolve, BackendKind, EmbedderKind, Settings};

#[derive(Parser)]
#[command(name = "demo-forge", version, about = "Mine, filter and deploy in-context demonstrations")]
struct Cli {
    /// TOML settings file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Cap on concurrent backend calls.
    #[arg(long, global = true)]
    max_inflight: Option<usize>,
    /// mock-parametric, mock-scripted or http.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// JSON file configuring the mock backend.
    #[arg(long, global = true)]
    mock_config: Option<String>,
    /// Override any setting: --set key=value (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the seed prompt over a training subset and build Pool A.
    Harvest(HarvestArgs),
    /// Score difficulty, run the one-shot campaign and build Pools B and C.
    Refine(RefineArgs),
    /// Answer queries by majority vote over sampled contexts.
    Infer(InferArgs),
    /// Write analysis tables for a run.
    Stats(StatsArgs),
    /// Rank a pool by embedding similarity for every query.
    KnnRank(KnnArgs),
    /// Check a corpus or demonstration file.
    ValidateCorpus(ValidateArgs),
    /// Write a synthetic corpus, seed pool and mock configurations.
    Synth(SynthArgs),
}

#[derive(Args)]
struct HarvestArgs {
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    attempts: Option<u32>,
    #[arg(long)]
    seed_pool: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    format: Option<String>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    min_uses: Option<u32>,
    #[arg(long)]
    min_rate: Option<String>,
    /// Admit only difficulties strictly below the threshold.
    #[arg(long)]
    strict: bool,
    #[arg(long)]
    pairing_seed: Option<u64>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    run: PathBuf,
    /// Pool file name in the run directory.
    #[arg(long)]
    pool: Option<String>,
    /// Query corpus (JSONL).
    #[arg(long)]
    queries: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    attempts: Option<u32>,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// random or knn.
    #[arg(long)]
    selection: Option<String>,
    /// Use one sampled context for every attempt.
    #[arg(long)]
    reuse_context: bool,
    /// Results file, relative to the run directory.
    #[arg(long, default_value = "results.jsonl")]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Success-rate histogram bin width in percent.
    #[arg(long, default_value_t = 5)]
    bin_width: u32,
}

#[derive(Args)]
struct KnnArgs {
    #[arg(long)]
    run: PathBuf,
    /// Pool file name in the run directory.
    #[arg(long, default_value = "pool_b")]
    pool: String,
    /// Query corpus; defaults to the run's unsolved samples.
    #[arg(long)]
    queries: Option<String>,
}

#[derive(Args)]
struct ValidateArgs {
    file: PathBuf,
    /// Validate a demonstration file instead of a sample corpus.
    #[arg(long)]
    demonstrations: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    seed_pool: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// A failure and the exit code it maps to.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => Failure::Usage(e.to_string()),
            PipelineError::Interrupted => Failure::Backend(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<config::ConfigError> for Failure {
    fn from(e: config::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn text(s: &str) -> Value {
    Value::String(s.to_string())
}

fn int(n: u64) -> Value {
    Value::Integer(n as i64)
}

/// Settings flags shared by every subcommand plus `extra`.
fn settings(cli: &Cli, extra: Vec<(&'static str, Value)>) -> Result<Settings, Failure> {
    let mut flags: Vec<(&str, Value)> = Vec::new();
    let mut sets: Vec<(String, Value)> = Vec::new();
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        sets.push((k.trim().to_string(), config::parse_value(v.trim())));
    }
    flags.extend(sets.iter().map(|(k, v)| (k.as_str(), v.clone())));
    if let Some(p) = cli.parallel {
        flags.push(("parallel", int(p as u64)));
    }
    if let Some(m) = cli.max_inflight {
        flags.push(("max_inflight", int(m as u64)));
    }
    if let Some(b) = &cli.backend {
        flags.push(("backend", text(b)));
    }
    if let Some(m) = &cli.mock_config {
        flags.push(("mock_config", text(m)));
    }
    flags.extend(extra);
    Ok(resolve(cli.config.as_deref(), |k| std::env::var(k).ok(), &flags)?)
}

fn workers(s: &Settings) -> usize {
    if s.parallel == 0 {
        default_parallelism()
    } else {
        s.parallel
    }
}

fn style(s: &Settings) -> PromptStyle {
    PromptStyle {
        instruction: s.instruction.clone(),
        language: s.language,
        ..Default::default()
    }
}

fn read_json_file<T: serde::de::DeserializeOwned>(path: &str, what: &str) -> Result<T, Failure> {
    if path.is_empty() {
        return Err(Failure::Usage(format!("{what} is required (set mock_config)")));
    }
    let bytes = fs::read(path).map_err(|e| Failure::Data(format!("{path}: {e}")))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Data(format!("{path}: {e}")))
}

fn build_backend(s: &Settings, run: Option<&RunDir>) -> Result<Box<dyn Backend>, Failure> {
    let inner: Box<dyn Backend> = match s.backend {
        BackendKind::MockParametric => {
            let cfg: ParametricConfig = read_json_file(&s.mock_config, "a parametric mock configuration")?;
            Box::new(ParametricMock::new(cfg))
        }
        BackendKind::MockScripted => {
            let script: Script = read_json_file(&s.mock_config, "a mock script")?;
            Box::new(ScriptedMock::from_script(&script))
        }
        BackendKind::Http => {
            if s.base_url.is_empty() || s.model.is_empty() {
                return Err(Failure::Usage("the http backend needs base_url and model".into()));
            }
            let cfg = HttpConfig {
                base_url: s.base_url.clone(),
                path: s.completions_path.clone(),
                model: s.model.clone(),
                timeout_secs: s.timeout_secs,
                retry: RetryPolicy {
                    max_retries: s.max_retries,
                    base_delay_ms: s.base_delay_ms,
                    max_delay_ms: s.max_delay_ms,
                },
                requests_per_minute: (s.requests_per_minute > 0).then_some(s.requests_per_minute),
            };
            Box::new(HttpBackend::new(cfg).map_err(|e| Failure::Backend(e.to_string()))?)
        }
    };
    let bounded: Box<dyn Backend> = Box::new(BoundedBackend::new(inner, s.max_inflight));
    match (s.log_exchanges, run) {
        (true, Some(run)) => {
            let log = Arc::new(Appender::open(run.join("exchanges.jsonl"))?);
            Ok(Box::new(LoggingBackend::new(bounded, log)))
        }
        _ => Ok(bounded),
    }
}

fn build_python(s: &Settings, workers: usize) -> Result<Option<SidecarPool>, Failure> {
    if s.language != LanguageTag::Python {
        return Ok(None);
    }
    let (program, args) = s
        .python_sidecar
        .split_first()
        .ok_or_else(|| Failure::Usage("python steps need python_sidecar".into()))?;
    let mut cmd = SidecarCommand::new(program.clone()).timeout_ms(s.sidecar_timeout_ms);
    for a in args {
        cmd = cmd.arg(a.clone());
    }
    SidecarPool::start(&cmd, workers)
        .map(Some)
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn build_embedder(s: &Settings) -> Result<Box<dyn Embedder>, Failure> {
    match s.embedder {
        EmbedderKind::Mock => Ok(Box::new(MockEmbedder::default())),
        EmbedderKind::Http => {
            let cache = (!s.embed_cache.is_empty()).then(|| PathBuf::from(&s.embed_cache));
            HttpEmbedder::new(&s.embed_base_url, &s.embed_model, cache, s.timeout_secs)
                .map(|e| Box::new(e) as Box<dyn Embedder>)
                .map_err(|e| Failure::Backend(e.to_string()))
        }
    }
}

fn open_run(path: &Path, s: &Settings) -> Result<RunDir, Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let run = RunDir::new(path);
    run.record_config("cli", &config_digest(s), s)?;
    Ok(run)
}

fn check_backend(issued: IssueStats, stage: &str) -> Outcome {
    if issued.all_failed() {
        return Err(Failure::Backend(format!(
            "{stage}: all {} backend calls failed",
            issued.issued
        )));
    }
    if issued.backend_errors > 0 {
        tracing::warn!(stage, failed = issued.backend_errors, "some backend calls failed");
    }
    Ok(())
}

fn pool_path(run: &RunDir, name: &str) -> PathBuf {
    if name.ends_with(".jsonl") {
        run.join(name)
    } else {
        run.join(&format!("{name}.jsonl"))
    }
}

fn run(cli: Cli) -> Outcome {
    match &cli.cmd {
        Cmd::Harvest(a) => {
            let mut extra = Vec::new();
            if let Some(v) = &a.corpus {
                extra.push(("corpus", text(v)));
            }
            if let Some(v) = a.subset {
                extra.push(("subset", int(v as u64)));
            }
            if let Some(v) = a.attempts {
                extra.push(("attempts", int(v as u64)));
            }
            if let Some(v) = &a.seed_pool {
                extra.push(("seed_pool", text(v)));
            }
            if let Some(v) = a.shots {
                extra.push(("harvest_shots", int(v as u64)));
            }
            if let Some(v) = a.seed {
                extra.push(("harvest_seed", int(v)));
            }
            if let Some(v) = &a.format {
                extra.push(("format", text(v)));
            }
            let s = settings(&cli, extra)?;
            cmd_harvest(&s, &a.out)
        }
        Cmd::Refine(a) => {
            let mut extra = Vec::new();
            if let Some(v) = &a.threshold {
                extra.push(("threshold", text(v)));
            }
            if let Some(v) = a.min_uses {
                extra.push(("min_uses", int(v as u64)));
            }
            if let Some(v) = &a.min_rate {
                extra.push(("min_rate", text(v)));
            }
            if a.strict {
                extra.push(("strict_threshold", Value::Boolean(true)));
            }
            if let Some(v) = a.pairing_seed {
                extra.push(("pairing_seed", int(v)));
            }
            let s = settings(&cli, extra)?;
            cmd_refine(&s, &a.run)
        }
        Cmd::Infer(a) => {
            let mut extra = Vec::new();
            if let Some(v) = &a.pool {
                extra.push(("pool", text(v)));
            }
            if let Some(v) = &a.queries {
                extra.push(("queries", text(v)));
            }
            if let Some(v) = a.shots {
                extra.push(("infer_shots", int(v as u64)));
            }
            if let Some(v) = a.attempts {
                extra.push(("infer_attempts", int(v as u64)));
            }
            if let Some(v) = &a.format {
                extra.push(("format", text(v)));
            }
            if let Some(v) = a.seed {
                extra.push(("infer_seed", int(v)));
            }
            if let Some(v) = &a.selection {
                extra.push(("selection", text(v)));
            }
            if a.reuse_context {
                extra.push(("reuse_context", Value::Boolean(true)));
            }
            let s = settings(&cli, extra)?;
            cmd_infer(&s, &a.run, &a.out)
        }
        Cmd::Stats(a) => {
            let run = RunDir::new(&a.run);
            let st = stats::compute(&run, a.bin_width).map_err(|e| Failure::Data(e.to_string()))?;
            stats::write_all(&st, &a.out).map_err(|e| Failure::Data(e.to_string()))?;
            print!("{}", st.pool_table.to_csv());
            Ok(())
        }
        Cmd::KnnRank(a) => {
            let s = settings(&cli, Vec::new())?;
            cmd_knn(&s, a)
        }
        Cmd::ValidateCorpus(a) => {
            let n = if a.demonstrations {
                load_demonstrations(&a.file)?.len()
            } else {
                load_corpus(&a.file)?.len()
            };
            println!("{}: {n} records ok", a.file.display());
            Ok(())
        }
        Cmd::Synth(a) => cmd_synth(a),
    }
}

fn cmd_harvest(s: &Settings, out: &Path) -> Outcome {
    if s.corpus.is_empty() || s.seed_pool.is_empty() {
        return Err(Failure::Usage("harvest needs --corpus and --seed-pool".into()));
    }
    let corpus = load_corpus(&s.corpus)?;
    let seed_pool = ShotPool::new(load_demonstrations(&s.seed_pool)?);
    let run = open_run(out, s)?;
    let backend = build_backend(s, Some(&run))?;
    let workers = workers(s);
    let python = build_python(s, workers)?;
    let cfg = HarvestConfig {
        corpus: s.corpus.clone(),
        train_subset_size: s.subset,
        attempts_per_sample: s.attempts,
        seed_pool: s.seed_pool.clone(),
        n_shots: s.harvest_shots,
        format: s.format,
        token_budget: s.token_budget,
        type_filter: s.type_filter,
        temperature: s.harvest_temperature,
        max_new_tokens: s.max_new_tokens,
        seed: s.harvest_seed,
        backend_id: backend.id().to_string(),
        style: style(s),
    };
    let mut env = Env::new(backend.as_ref()).workers(workers);
    if let Some(p) = &python {
        env = env.python(p as &dyn ProgramExecutor);
    }
    let rep = harvest(&cfg, &corpus, &seed_pool, &env, &run)?;
    check_backend(rep.issued, "harvest")?;
    println!(
        "pool_a={} unsolved={} indeterminate={}",
        rep.pool_a.len(),
        rep.unsolved.len(),
        rep.indeterminate.len()
    );
    Ok(())
}

fn cmd_refine(s: &Settings, run_path: &Path) -> Outcome {
    let run = open_run(run_path, s)?;
    let backend = build_backend(s, Some(&run))?;
    let workers = workers(s);
    let python = build_python(s, workers)?;
    let cfg = RefineConfig {
        difficulty_threshold: s.threshold,
        strict_threshold: s.strict_threshold,
        min_uses: s.min_uses,
        min_solve_rate: s.min_rate,
        one_shot_temperature: s.one_shot_temperature,
        pairing_seed: s.pairing_seed,
        format: s.format,
        token_budget: s.token_budget,
        max_new_tokens: s.max_new_tokens,
        style: style(s),
    };
    let mut env = Env::new(backend.as_ref()).workers(workers);
    if let Some(p) = &python {
        env = env.python(p as &dyn ProgramExecutor);
    }
    let rep = refine(&cfg, &env, &run)?;
    check_backend(rep.campaign.issued, "refine")?;
    if let Some(q) = rep.campaign.shortfall {
        eprintln!("warning: only {q} unsolved queries for min_uses {}", s.min_uses);
    }
    print!("{}", fs::read_to_string(run.join(demo_forge::refine::POOL_TABLE)).unwrap_or_default());
    Ok(())
}

fn cmd_infer(s: &Settings, run_path: &Path, out: &Path) -> Outcome {
    if s.queries.is_empty() {
        return Err(Failure::Usage("infer needs --queries".into()));
    }
    let queries = load_corpus(&s.queries)?;
    let run = open_run(run_path, s)?;
    let (_, demos) = read_pool(pool_path(&run, &s.pool))?;
    let pool = ShotPool::new(demos);
    let backend = build_backend(s, Some(&run))?;
    let workers = workers(s);
    let python = build_python(s, workers)?;
    let embedder = match s.selection {
        ShotSelection::Knn => Some(build_embedder(s)?),
        ShotSelection::Random => None,
    };
    let cfg = InferenceConfig {
        n_attempts: s.infer_attempts,
        n_shots: s.infer_shots,
        temperature: s.infer_temperature,
        pool: s.pool.clone(),
        format: s.format,
        type_filter: s.type_filter,
        seed: s.infer_seed,
        token_budget: s.token_budget,
        max_new_tokens: s.max_new_tokens,
        reuse_context: s.reuse_context,
        selection: s.selection,
        style: style(s),
    };
    let mut env = Env::new(backend.as_ref()).workers(workers);
    if let Some(p) = &python {
        env = env.python(p as &dyn ProgramExecutor);
    }
    let rep = evaluate(&queries, &cfg, &pool, &env, embedder.as_deref(), Some(&run))?;
    check_backend(rep.issued, "infer")?;
    let out = if out.is_absolute() { out.to_path_buf() } else { run.root().join(out) };
    write_results(&out, &rep)?;
    println!(
        "accuracy={:.4} queries={} tie_rate={:.4} valid_rate={:.4}",
        rep.summary.accuracy, rep.summary.n_queries, rep.summary.tie_rate, rep.summary.valid_rate
    );
    Ok(())
}

fn cmd_knn(s: &Settings, a: &KnnArgs) -> Outcome {
    let run = RunDir::new(&a.run);
    let (_, pool) = read_pool(pool_path(&run, &a.pool))?;
    let queries: Vec<Sample> = match &a.queries {
        Some(q) => load_corpus(q)?,
        None => scan::<Sample>(run.unsolved())?.records,
    };
    let embedder = build_embedder(s)?;
    let index = KnnIndex::build(&pool, embedder.as_ref()).map_err(|e| Failure::Backend(e.to_string()))?;
    let mut rankings = Vec::with_capacity(queries.len());
    for q in &queries {
        let ranking = index
            .rank(q, embedder.as_ref())
            .map_err(|e| Failure::Backend(e.to_string()))?;
        rankings.push(KnnRanking {
            query_id: q.id.clone(),
            embedder: embedder.id().to_string(),
            ranking,
        });
    }
    write_records(run.join(KNN_RANKS), &rankings)?;
    println!("ranked {} members for {} queries", pool.len(), rankings.len());
    let results = scan::<OneShotResult>(run.one_shot_results())?.records;
    if !results.is_empty() {
        let by_query: BTreeMap<String, Vec<(String, f64)>> =
            rankings.into_iter().map(|r| (r.query_id, r.ranking)).collect();
        match good_shot_distribution(&results, &by_query) {
            Ok(rep) => match rep.mean_normalized_rank {
                Some(m) => println!("good-shot mean normalized rank={m:.4}"),
                None => println!("no good shots in the campaign"),
            },
            Err(e) => eprintln!("warning: {e}"),
        }
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Outcome {
    let world = World::generate(&WorldConfig {
        seed: a.seed,
        train: a.train,
        test: a.test,
        seed_pool: a.seed_pool,
        ..Default::default()
    });
    let io = |p: PathBuf| move |e: std::io::Error| Failure::Data(format!("{}: {e}", p.display()));
    fs::create_dir_all(&a.out).map_err(io(a.out.clone()))?;
    let write = |name: &str, items: &[serde_json::Value]| -> Outcome {
        let p = a.out.join(name);
        write_jsonl(&p, items).map_err(io(p))
    };
    let to_values = |xs: Vec<serde_json::Value>| xs;
    write(
        "train.jsonl",
        &to_values(world.train_samples().iter().map(|x| serde_json::to_value(x).unwrap()).collect()),
    )?;
    write(
        "test.jsonl",
        &to_values(world.test_samples().iter().map(|x| serde_json::to_value(x).unwrap()).collect()),
    )?;
    write(
        "seed_pool.jsonl",
        &to_values(world.seed_pool.iter().map(|x| serde_json::to_value(x).unwrap()).collect()),
    )?;
    for (name, cfg) in [
        ("harvest_mock.json", world.harvest_mock(a.seed)),
        ("campaign_mock.json", world.campaign_mock(a.seed, 0.3)),
        ("infer_mock.json", world.inference_mock(a.seed, 0.2, 0.03)),
    ] {
        let p = a.out.join(name);
        fs::write(&p, serde_json::to_vec_pretty(&cfg).unwrap()).map_err(io(p))?;
    }
    println!(
        "wrote {} train, {} test and {} seed samples to {}",
        world.train.len(),
        world.test.len(),
        world.seed_pool.len(),
        a.out.display()
    );
    Ok(())
}
