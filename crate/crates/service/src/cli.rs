//! Command-line front end. Every subcommand works offline with replay models
//! and the lexical oracle; live endpoints come from the config file.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use clinflow_core::casebank::{
    convert_to_initial_response, find_leakage, ingest_cases, inject_deep_thinking, transform_case, write_cases,
    InstructionResponsePair, RawQaRecord, StageCache,
};
use clinflow_core::llm::{JudgeClient, ReplayModel};
use clinflow_core::masks::{alternating_samples, write_samples};
use clinflow_core::metrics::attribution::{generate_perturbations, Mutator};
use clinflow_core::metrics::{evaluate_bank, AccuracyMode, EvalConfig, MetricReport, UsefulnessMode};
use clinflow_core::oracle::{ClinicalOracle, OracleMode};
use clinflow_core::preference::{build_case_preferences, write_pairs, PreferenceConfig, DEFAULT_K};
use clinflow_core::protocol::Transcript;
use clinflow_core::retrieval::{index_add, search_topk, FlatIndex, HashEmbedder, Paragraph, DEFAULT_DIMENSION};
use clinflow_core::stats::DEFAULT_RESAMPLES;
use clinflow_core::{CaseBank, SamplingParams};

use crate::config::{Config, ModelConfig};
use crate::http::{self, AppState};
use crate::sessions::SessionManager;
use crate::{invalid, DirectorSource};

#[derive(Debug, Parser)]
#[command(name = "clinflow", version, about = "Stepwise clinical-diagnosis sessions and evaluation")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "CLINFLOW_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a case bank and emit a metric report.
    Run(RunArgs),
    /// Turn raw QA records into cases, optionally with stepwise responses.
    Transform(TransformArgs),
    /// Build reasoning/knowledge masked samples from instruction-response pairs.
    Masks(MasksArgs),
    /// Build step-level preference pairs.
    Prefdata(PrefdataArgs),
    /// Manage the flat retrieval index.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Generate perturbed transcripts for the accountability experiment.
    Perturb(PerturbArgs),
    /// Serve the session API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DirectorArgs {
    /// JSONL replay file for the director; overrides `[director]`.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AccuracyArg {
    Normalized,
    Model,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub director: DirectorArgs,
    #[arg(long, value_enum, default_value = "normalized")]
    pub accuracy: AccuracyArg,
    /// JSONL replay file for the judge; overrides `[judge]`.
    #[arg(long)]
    pub judge_replay: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub rows_csv: Option<PathBuf>,
    #[arg(long)]
    pub breakdown_csv: Option<PathBuf>,
    /// Finished transcripts as JSONL (`case_id`, `correct`, `transcript`).
    #[arg(long)]
    pub sessions_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    /// Raw QA records, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSONL replay file for the judge; overrides `[judge]`.
    #[arg(long)]
    pub judge_replay: Option<PathBuf>,
    /// Stage cache; reruns reuse it.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Also convert each case into an instruction-response pair with deep thinking.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MasksArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    /// Bank supplying each pair's clinical information.
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PrefdataArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[command(flatten)]
    pub director: DirectorArgs,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Embed paragraphs (JSONL `doc_id`, `source`, `text`) and append them.
    Add {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Embedding dimension for a new index.
        #[arg(long, default_value_t = DEFAULT_DIMENSION)]
        dim: usize,
    },
    /// Print the top-k paragraphs for a query as JSONL.
    Query {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Transcripts as written by `run --sessions-out`.
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Use the configured judge to rewrite fields instead of the rule-based mutator.
    #[arg(long)]
    pub model_mutator: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub director: DirectorArgs,
    /// Overrides `[server] bind`.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub log_dir: Option<PathBuf>,
    #[arg(long)]
    pub physician_timeout_secs: Option<u64>,
}

/// One finished session, as exchanged between `run` and `perturb`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub case_id: String,
    #[serde(default = "yes")]
    pub correct: bool,
    pub transcript: Transcript,
}

fn yes() -> bool {
    true
}

pub fn execute(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load_or_default(cli.config.as_deref()).map_err(|e| invalid(format!("{e:#}")))?;
    match cli.command {
        Command::Run(a) => run(&cfg, &a),
        Command::Transform(a) => transform(&cfg, &a),
        Command::Masks(a) => masks(&a),
        Command::Prefdata(a) => prefdata(&cfg, &a),
        Command::Index(c) => index(c),
        Command::Perturb(a) => perturb(&cfg, &a),
        Command::Serve(a) => serve(&cfg, &a),
    }
}

pub fn load_bank(path: &Path) -> anyhow::Result<CaseBank> {
    ingest_cases(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_replay(path: &Path) -> anyhow::Result<ReplayModel> {
    ReplayModel::load(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn director_source(cfg: &Config, a: &DirectorArgs) -> anyhow::Result<DirectorSource> {
    let model = match &a.replay {
        Some(p) => ModelConfig::Replay { path: p.clone() },
        None => cfg.director.clone().ok_or_else(|| invalid("no director: pass --replay or set [director]"))?,
    };
    match model.replay().map_err(|e| invalid(format!("{e:#}")))? {
        Some(r) => Ok(DirectorSource::Replay(Arc::new(r.with_id("replay-director")))),
        None => Ok(DirectorSource::Shared(model.director()?)),
    }
}

fn judge(cfg: &Config, replay: Option<&Path>) -> anyhow::Result<Arc<dyn JudgeClient>> {
    match (replay, &cfg.judge) {
        (Some(p), _) => Ok(Arc::new(load_replay(p)?.with_id("replay-judge"))),
        (None, Some(m)) => m.judge().map_err(|e| invalid(format!("{e:#}"))),
        (None, None) => Err(invalid("no judge: pass --judge-replay or set [judge]")),
    }
}

/// The lexical oracle over every case in the bank.
pub fn bank_oracle(bank: &CaseBank) -> ClinicalOracle {
    ClinicalOracle::with_docs(
        OracleMode::Lexical,
        bank.iter().map(|c| {
            let mut doc = c.clinical_info.clone();
            doc.case_id = c.case_id.clone();
            doc
        }),
    )
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    let f = File::open(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// Evaluates the bank; shared by `run` and tests.
pub fn run_report(
    bank: &CaseBank,
    director: &DirectorSource,
    eval: &EvalConfig,
) -> anyhow::Result<(MetricReport, Vec<SessionRecord>)> {
    let oracle = bank_oracle(bank);
    let factory = |c: &clinflow_core::CaseRecord| director.for_case(&c.case_id);
    let (report, sessions) = evaluate_bank(bank, &factory, &oracle, eval)?;
    let records = report
        .rows
        .iter()
        .zip(sessions)
        .filter_map(|(row, s)| {
            s.map(|s| SessionRecord {
                case_id: row.case_id.clone(),
                correct: row.correct,
                transcript: s.transcript,
            })
        })
        .collect();
    Ok((report, records))
}

fn run(cfg: &Config, a: &RunArgs) -> anyhow::Result<()> {
    let bank = load_bank(&a.bank)?;
    let director = director_source(cfg, &a.director)?;
    let accuracy = match a.accuracy {
        AccuracyArg::Normalized => AccuracyMode::Normalized,
        AccuracyArg::Model => AccuracyMode::Model(judge(cfg, a.judge_replay.as_deref())?),
    };
    let eval = EvalConfig {
        session: cfg.session.clone(),
        accuracy,
        usefulness: UsefulnessMode::Lexical,
        n_resamples: a.resamples,
        bootstrap_seed: a.seed,
    };
    let (report, records) = run_report(&bank, &director, &eval)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            writeln!(w, "{json}")?;
            w.flush()?;
        }
        None => println!("{json}"),
    }
    if let Some(p) = &a.rows_csv {
        report.write_rows_csv(create(p)?)?;
    }
    if let Some(p) = &a.breakdown_csv {
        report.write_breakdown_csv(create(p)?)?;
    }
    if let Some(p) = &a.sessions_out {
        let mut w = create(p)?;
        for r in &records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn transform(cfg: &Config, a: &TransformArgs) -> anyhow::Result<()> {
    let raws: Vec<RawQaRecord> = read_jsonl(&a.input)?;
    let judge = judge(cfg, a.judge_replay.as_deref())?;
    let mut cache = match &a.cache {
        Some(p) => StageCache::open(p)?,
        None => StageCache::in_memory(),
    };
    let mut cases = Vec::with_capacity(raws.len());
    for raw in &raws {
        cases.push(transform_case(raw, judge.as_ref(), &mut cache)?);
    }
    let mut w = create(&a.out)?;
    write_cases(&cases, &mut w)?;
    w.flush()?;
    if let Some(p) = &a.pairs {
        let mut w = create(p)?;
        for case in &cases {
            let draft = convert_to_initial_response(case, judge.as_ref(), &mut cache)?;
            let pair = inject_deep_thinking(&draft, judge.as_ref(), &mut cache)?;
            if let Some(step) = find_leakage(&pair.response) {
                eprintln!("warning: {}: deep thinking at step {step} leaks a later answer", case.case_id);
            }
            serde_json::to_writer(&mut w, &pair)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

fn masks(a: &MasksArgs) -> anyhow::Result<()> {
    let bank = load_bank(&a.bank)?;
    let pairs: Vec<InstructionResponsePair> = read_jsonl(&a.pairs)?;
    let mut inputs = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let id = p.case_id.as_deref().ok_or_else(|| invalid(format!("pair {} has no case_id", i + 1)))?;
        let case = bank.get(id).ok_or_else(|| invalid(format!("pair {}: unknown case {id}", i + 1)))?;
        inputs.push((p, &case.clinical_info));
    }
    let samples = alternating_samples(inputs).map_err(invalid)?;
    let mut w = create(&a.out)?;
    write_samples(&samples, &mut w)?;
    w.flush()?;
    Ok(())
}

fn prefdata(cfg: &Config, a: &PrefdataArgs) -> anyhow::Result<()> {
    if a.k < 2 {
        bail!(invalid("k must be at least 2"));
    }
    let bank = load_bank(&a.bank)?;
    let director = director_source(cfg, &a.director)?;
    let oracle = bank_oracle(&bank);
    let pcfg = PreferenceConfig {
        k: a.k,
        sampling: SamplingParams::sampling(a.seed),
        session: cfg.session.clone(),
    };
    let mut w = create(&a.out)?;
    for case in bank.iter() {
        let d = director.for_case(&case.case_id);
        let (_, pairs) = build_case_preferences(case, d.as_ref(), &oracle, &pcfg, &AccuracyMode::Normalized)
            .with_context(|| format!("case {}", case.case_id))?;
        write_pairs(&pairs, &mut w)?;
    }
    w.flush()?;
    Ok(())
}

fn index(c: IndexCommand) -> anyhow::Result<()> {
    match c {
        IndexCommand::Add { dir, input, dim } => {
            let paragraphs: Vec<Paragraph> = read_jsonl(&input)?;
            let (mut idx, fresh) = if dir.join("vectors.bin").exists() {
                (FlatIndex::load(&dir)?, false)
            } else {
                (FlatIndex::new(dim), true)
            };
            let embedder = HashEmbedder::new(idx.dimension());
            let mut staging = FlatIndex::new(idx.dimension());
            let entries = index_add(&mut staging, paragraphs, &embedder).map_err(invalid)?;
            if fresh {
                idx.add(entries)?;
                idx.save(&dir)?;
            } else {
                idx.append_persisted(&dir, entries).map_err(invalid)?;
            }
            eprintln!("{} paragraphs in {}", idx.len(), dir.display());
            Ok(())
        }
        IndexCommand::Query { dir, query, k } => {
            let idx = FlatIndex::load(&dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
            let embedder = HashEmbedder::new(idx.dimension());
            let hits = search_topk(&idx, &query, k, &embedder).map_err(invalid)?;
            let stdout = io::stdout();
            let mut out = stdout.lock();
            for h in hits {
                let p = idx.paragraph(idx.find(&h.doc_id).expect("hit is indexed"));
                let line = serde_json::json!({
                    "doc_id": h.doc_id,
                    "score": h.score,
                    "source": p.source,
                    "text": p.text,
                });
                writeln!(out, "{line}")?;
            }
            Ok(())
        }
    }
}

fn perturb(cfg: &Config, a: &PerturbArgs) -> anyhow::Result<()> {
    let records: Vec<SessionRecord> = read_jsonl(&a.sessions)?;
    let sources: Vec<(String, Transcript)> = records
        .into_iter()
        .filter(|r| r.correct)
        .map(|r| (r.case_id, r.transcript))
        .collect();
    let mutator = if a.model_mutator {
        Mutator::Model(judge(cfg, None)?)
    } else {
        Mutator::Deterministic
    };
    let fixtures = generate_perturbations(&sources, a.n, a.seed, &mutator).map_err(invalid)?;
    let mut w = create(&a.out)?;
    for f in &fixtures {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn serve(cfg: &Config, a: &ServeArgs) -> anyhow::Result<()> {
    let director = director_source(cfg, &a.director)?;
    let bind = a.bind.clone().unwrap_or_else(|| cfg.server.bind.clone());
    let timeout = Duration::from_secs(a.physician_timeout_secs.unwrap_or(cfg.server.physician_timeout_secs));
    let log_dir = a.log_dir.clone().unwrap_or_else(|| cfg.server.log_dir.clone());
    let token = match &cfg.server.token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| invalid(format!("{var} is not set")))?),
        None => None,
    };
    let eval = EvalConfig {
        session: cfg.session.clone(),
        ..EvalConfig::default()
    };
    let manager = SessionManager::new(director, cfg.session.clone(), eval, timeout, Some(log_dir));
    let app = AppState {
        sessions: Arc::new(manager),
        token,
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        http::serve(listener, app).await?;
        Ok(())
    })
}
