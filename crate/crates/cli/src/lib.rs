//! `chatdecide` command line: synth, extract, evaluate, report, compare.
//!
//! Exit codes: 0 success, 1 runtime or partial failure, 2 usage or
//! configuration error. All relative paths resolve against `--workdir`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use chatdecide::backend::{
    Budget, ChatBackend, Client, ClientConfig, Fallback, RemoteBackend, RemoteConfig, Script,
    ScriptedBackend,
};
use chatdecide::exec::Execution;
use chatdecide::metrics::{StdKind, TableScoring};
use chatdecide::model::{load_corpus, save_corpus};
use chatdecide::pipeline::{
    load_bundles, save_bundles, GroupInput, Pipeline, RunConfig, SelectionMode,
};
use chatdecide::prompts::{PromptTechnique, StepId};
use chatdecide::report::{self, ReportOptions};
use chatdecide::store::RunStore;
use chatdecide::synth::{generate_corpus, truth_script, ScenarioParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const BUNDLES_DIR: &str = "bundles";
pub const RUNS_DIR: &str = "runs";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Parser)]
#[command(
    name = "chatdecide",
    version,
    about = "Extract and evaluate group decision tables from chat transcripts"
)]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// TOML experiment file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic corpus.
    Synth(SynthArgs),
    /// Run the four-step chain over a corpus.
    Extract(ExtractArgs),
    /// Score bundles against ground truth and write every report artifact.
    Evaluate(EvaluateArgs),
    /// Rebuild score grids from a persisted score file.
    Report(ReportArgs),
    /// Cell-by-cell mean differences between two reports.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// TOML scenario parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Replays each group's own annotation as the model output.
    Truth,
    /// Replays a JSONL script keyed by group, step, technique and run.
    Script,
    /// OpenAI-compatible chat completions endpoint.
    Remote,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Script file for the `script` backend.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long)]
    pub base_url: Option<String>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub runs: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_selection)]
    pub selection: Option<SelectionMode>,
    /// Select runs by parse issues instead of ground-truth scores.
    #[arg(long)]
    pub truth_free: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub max_requests: Option<u64>,
    #[arg(long)]
    pub max_tokens: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Bundle directory, or an extract output directory containing one.
    #[arg(long)]
    pub bundles: PathBuf,
    /// Labeled corpus directory.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_table_scoring)]
    pub table_scoring: Option<TableScoring>,
    #[arg(long, value_parser = parse_std)]
    pub std: Option<StdKind>,
    /// Pool confusion matrices over selected runs only.
    #[arg(long)]
    pub selected_only: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_std)]
    pub std: Option<StdKind>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub report_a: PathBuf,
    #[arg(long)]
    pub report_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_selection(s: &str) -> Result<SelectionMode, String> {
    match s {
        "per-group" => Ok(SelectionMode::PerGroup),
        "global-per-technique" => Ok(SelectionMode::GlobalPerTechnique),
        _ => Err(format!(
            "expected per-group or global-per-technique, got `{s}`"
        )),
    }
}

fn parse_table_scoring(s: &str) -> Result<TableScoring, String> {
    match s {
        "aligned" => Ok(TableScoring::Aligned),
        "raw" => Ok(TableScoring::Raw),
        _ => Err(format!("expected aligned or raw, got `{s}`")),
    }
}

fn parse_std(s: &str) -> Result<StdKind, String> {
    match s {
        "sample" => Ok(StdKind::Sample),
        "population" => Ok(StdKind::Population),
        _ => Err(format!("expected sample or population, got `{s}`")),
    }
}

/// Experiment file. Every field is optional; flags win over it.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub extract: ExtractSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub seed: Option<u64>,
    pub groups: Option<usize>,
    pub params: Option<ScenarioParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractSection {
    pub techniques: Option<BTreeMap<StepId, Vec<PromptTechnique>>>,
    pub runs_per_technique: Option<u32>,
    pub seed: Option<u64>,
    pub repair_reprompts: Option<u32>,
    pub selection: Option<SelectionMode>,
    pub table_scoring: Option<TableScoring>,
    pub truth_free: Option<bool>,
    pub execution: Option<Execution>,
    pub workers: Option<usize>,
    pub reasoning_language: Option<String>,
    pub temperature: Option<f64>,
    pub max_output: Option<u32>,
    pub model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub kind: Option<BackendKind>,
    pub script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub path: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_requests: Option<u64>,
    pub max_tokens: Option<u64>,
    pub retry_limit: Option<u32>,
    pub max_in_flight: Option<usize>,
    pub min_interval_ms: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub table_scoring: Option<TableScoring>,
    pub std: Option<StdKind>,
    pub selected_only: Option<bool>,
}

/// Failure classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_PARTIAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (CliError::Usage(e) | CliError::Runtime(e)) = self;
        // Causes already quoted by their parent are printed once.
        let mut out = String::new();
        for cause in e.chain() {
            let msg = cause.to_string();
            if !out.contains(&msg) {
                if !out.is_empty() {
                    out.push_str(": ");
                }
                out.push_str(&msg);
            }
        }
        f.write_str(&out)
    }
}

fn usage(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

/// Outcome of a subcommand that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub message: String,
}

impl Outcome {
    fn ok(message: String) -> Self {
        Outcome {
            code: EXIT_OK,
            message,
        }
    }
}

struct Ctx {
    workdir: PathBuf,
    file: FileConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

pub fn load_file_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let file = match &cli.config {
        Some(p) => {
            let p = if p.is_absolute() {
                p.clone()
            } else {
                cli.workdir.join(p)
            };
            load_file_config(&p).map_err(usage)?
        }
        None => FileConfig::default(),
    };
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
        file,
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Extract(a) => cmd_extract(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Report(a) => cmd_report(&ctx, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
    }
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<Outcome, CliError> {
    let seed = a.seed.or(ctx.file.synth.seed).unwrap_or(1);
    let groups = a.groups.or(ctx.file.synth.groups).unwrap_or(47);
    if groups == 0 {
        return Err(usage(anyhow::anyhow!("--groups must be at least 1")));
    }
    let params = match &a.params {
        Some(p) => {
            let p = ctx.path(p);
            let text = fs::read_to_string(&p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(usage)?;
            toml::from_str::<ScenarioParams>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(usage)?
        }
        None => ctx.file.synth.params.clone().unwrap_or_default(),
    };
    params.validate().map_err(usage)?;
    let corpus = generate_corpus(seed, groups, &params).map_err(runtime)?;
    let out = ctx.path(&a.out);
    save_corpus(&out, &corpus).map_err(runtime)?;
    Ok(Outcome::ok(format!(
        "wrote {} groups to {}",
        corpus.entries.len(),
        out.display()
    )))
}

fn run_config(ctx: &Ctx, a: &ExtractArgs) -> Result<RunConfig, CliError> {
    let f = &ctx.file.extract;
    let mut cfg = RunConfig::default();
    if let Some(t) = &f.techniques {
        cfg.techniques = t.clone();
    }
    cfg.runs_per_technique = a
        .runs
        .or(f.runs_per_technique)
        .unwrap_or(cfg.runs_per_technique);
    cfg.seed = a.seed.or(f.seed);
    cfg.repair_reprompts = f.repair_reprompts.unwrap_or(cfg.repair_reprompts);
    cfg.selection = a.selection.or(f.selection).unwrap_or(cfg.selection);
    cfg.table_scoring = f.table_scoring.unwrap_or(cfg.table_scoring);
    cfg.use_truth = !(a.truth_free || f.truth_free.unwrap_or(false));
    cfg.execution = if a.sequential {
        Execution::Sequential
    } else {
        f.execution.unwrap_or_default()
    };
    cfg.prompt_options.reasoning_language = f.reasoning_language.clone();
    cfg.sampling.temperature = a.temperature.or(f.temperature);
    cfg.sampling.max_output = f.max_output;
    if let Some(m) = a.model.clone().or_else(|| f.model.clone()) {
        cfg.sampling.model_name = m;
    }
    cfg.validate().map_err(|e| usage(anyhow::anyhow!(e)))?;
    Ok(cfg)
}

fn client_config(ctx: &Ctx, a: &ExtractArgs) -> ClientConfig {
    let b = &ctx.file.backend;
    let mut cfg = ClientConfig::default();
    if let Some(r) = b.retry_limit {
        cfg.retry_limit = r;
    }
    if let Some(n) = a.workers.or(ctx.file.extract.workers).or(b.max_in_flight) {
        cfg.max_in_flight = n.max(1);
    }
    if let Some(ms) = b.min_interval_ms {
        cfg.min_interval = Duration::from_millis(ms);
    }
    cfg.budget = Budget {
        max_requests: a.max_requests.or(b.max_requests),
        max_tokens: a.max_tokens.or(b.max_tokens),
    };
    cfg
}

fn make_backend(
    ctx: &Ctx,
    a: &ExtractArgs,
    kind: BackendKind,
    corpus: &chatdecide::model::Corpus,
    run: &RunConfig,
) -> Result<Box<dyn ChatBackend>, CliError> {
    let b = &ctx.file.backend;
    Ok(match kind {
        BackendKind::Truth => {
            if corpus.entries.iter().any(|e| e.annotation.is_none()) {
                return Err(usage(anyhow::anyhow!(
                    "the truth backend needs an annotation for every group"
                )));
            }
            let script = truth_script(corpus, &run.techniques, run.runs_per_technique);
            Box::new(ScriptedBackend::new(script, Fallback::Error))
        }
        BackendKind::Script => {
            let p = a
                .script
                .clone()
                .or_else(|| b.script.clone())
                .ok_or_else(|| usage(anyhow::anyhow!("the script backend needs --script")))?;
            let script = Script::load(&ctx.path(&p)).map_err(|e| usage(anyhow::anyhow!(e)))?;
            Box::new(ScriptedBackend::new(script, Fallback::Error))
        }
        BackendKind::Remote => {
            let url = a
                .base_url
                .clone()
                .or_else(|| b.base_url.clone())
                .ok_or_else(|| usage(anyhow::anyhow!("the remote backend needs --base-url")))?;
            let mut rc = RemoteConfig::new(url);
            if let Some(p) = &b.path {
                rc.path = p.clone();
            }
            if let Some(k) = &b.api_key_env {
                rc.api_key_env = k.clone();
            }
            if let Some(t) = b.timeout_secs {
                rc.timeout = Duration::from_secs(t);
            }
            let remote = RemoteBackend::new(rc).map_err(usage)?;
            remote
                .probe()
                .context("connectivity probe failed")
                .map_err(usage)?;
            Box::new(remote)
        }
    })
}

fn cmd_extract(ctx: &Ctx, a: ExtractArgs) -> Result<Outcome, CliError> {
    let run_cfg = run_config(ctx, &a)?;
    let kind = a.backend.or(ctx.file.backend.kind).ok_or_else(|| {
        usage(anyhow::anyhow!(
            "--backend is required (truth, script or remote)"
        ))
    })?;
    let client_cfg = client_config(ctx, &a);
    if let Some(n) = a.workers.or(ctx.file.extract.workers) {
        Execution::configure_workers(n);
    }
    let corpus_path = ctx.path(&a.corpus);
    let corpus = load_corpus(&corpus_path).map_err(usage)?;
    let backend = make_backend(ctx, &a, kind, &corpus, &run_cfg)?;
    let client = Client::new(backend, client_cfg).map_err(usage)?;

    let out = ctx.path(&a.out);
    let store = RunStore::open(out.join(RUNS_DIR)).map_err(runtime)?;
    let pipeline = Pipeline::new(run_cfg, &client, Some(store)).map_err(usage)?;
    let result = pipeline.run_corpus(&GroupInput::from_corpus(&corpus));
    save_bundles(&out.join(BUNDLES_DIR), &result.bundles).map_err(runtime)?;
    let failures = serde_json::to_string_pretty(&result.failures).map_err(runtime)? + "\n";
    let fpath = out.join(FAILURES_FILE);
    fs::write(&fpath, failures)
        .with_context(|| format!("writing {}", fpath.display()))
        .map_err(runtime)?;

    let sent = client.requests_sent();
    tracing::info!(new_requests = sent, "extraction finished");
    let message = format!(
        "extracted {} groups ({} failed), {} new requests",
        result.bundles.len(),
        result.failures.len(),
        sent
    );
    if !result.failures.is_empty() {
        for f in &result.failures {
            eprintln!("failed group {}: {}", f.group_id, f.error);
        }
        return Ok(Outcome {
            code: EXIT_PARTIAL,
            message,
        });
    }
    Ok(Outcome::ok(message))
}

fn bundle_dir(p: PathBuf) -> PathBuf {
    let nested = p.join(BUNDLES_DIR);
    if nested.is_dir() {
        nested
    } else {
        p
    }
}

fn cmd_evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<Outcome, CliError> {
    let e = &ctx.file.evaluate;
    let opts = ReportOptions {
        std: a.std.or(e.std).unwrap_or_default(),
        table_scoring: a.table_scoring.or(e.table_scoring).unwrap_or_default(),
        selected_only: a.selected_only || e.selected_only.unwrap_or(false),
    };
    let bundles = load_bundles(&bundle_dir(ctx.path(&a.bundles))).map_err(runtime)?;
    let truth = load_corpus(ctx.path(&a.truth)).map_err(runtime)?;
    let rep = report::build_report(&bundles, &truth, &opts).map_err(runtime)?;
    let out = ctx.path(&a.out);
    let files = report::export(&rep, &out).map_err(runtime)?;
    Ok(Outcome::ok(format!(
        "scored {} groups, wrote {} files to {}",
        rep.metadata.as_ref().map_or(0, |m| m.groups),
        files.len(),
        out.display()
    )))
}

fn scores_path(p: PathBuf) -> PathBuf {
    if p.is_dir() {
        p.join(report::SCORES_FILE)
    } else {
        p
    }
}

fn cmd_report(ctx: &Ctx, a: ReportArgs) -> Result<Outcome, CliError> {
    let std = a.std.or(ctx.file.evaluate.std).unwrap_or_default();
    let rows = report::read_scores(&scores_path(ctx.path(&a.scores))).map_err(runtime)?;
    let rep = report::report_from_rows(rows, std).map_err(runtime)?;
    let out = ctx.path(&a.out);
    let files = report::export(&rep, &out).map_err(runtime)?;
    Ok(Outcome::ok(format!(
        "wrote {} files to {}",
        files.len(),
        out.display()
    )))
}

fn cmd_compare(ctx: &Ctx, a: CompareArgs) -> Result<Outcome, CliError> {
    let std = ctx.file.evaluate.std.unwrap_or_default();
    let grids = |p: &Path| -> Result<_, CliError> {
        let rows = report::read_scores(&scores_path(ctx.path(p))).map_err(runtime)?;
        report::fold_grids(&rows, std).map_err(runtime)
    };
    let (ga, gb) = (grids(&a.report_a)?, grids(&a.report_b)?);
    let deltas = report::compare(&ga, &gb);
    if deltas.is_empty() {
        return Err(runtime(anyhow::anyhow!(
            "the two reports share no score cell"
        )));
    }
    let out = ctx.path(&a.out);
    fs::create_dir_all(&out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let path = out.join(report::DELTA_FILE);
    fs::write(&path, report::delta_csv(&deltas))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)?;
    Ok(Outcome::ok(format!(
        "wrote {} deltas to {}",
        deltas.len(),
        path.display()
    )))
}

/// Parse `args`, run, print, and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(o) => {
            println!("{}", o.message);
            o.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
