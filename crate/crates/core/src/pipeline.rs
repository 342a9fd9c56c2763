//! Four-step chained extraction with best-iteration selection.
//!
//! Steps run in order across all groups. Within a step, every
//! (group, technique, run) job is independent and runs through [`Execution`];
//! selection then picks one run per group and its rendered payload is appended
//! to that group's chain context.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    BackendError, ChatRequest, ChatTurn, Client, CompletionRecord, RequestKey, SamplingParams,
};
use crate::exec::Execution;
use crate::metrics::{self, TableScoring};
use crate::model::corpus::{write_json, CorpusError, FORMAT_VERSION};
use crate::model::{
    render_prompt_input, CellTable, Corpus, EgocentrismResult, FactorSet, GroupAnnotation,
    MentionLabel, NameResolver, PerceptionLabel, Step1Result, Transcript,
};
use crate::parser::{self, Issue, ParseOutcome, ParseStatus, TableKind};
use crate::prompts::{
    self, ChainContext, PromptBundle, PromptError, PromptOptions, PromptTechnique, StepId,
};
use crate::store::{record_path, RunStore, StoreError};

/// Scores closer than this are treated as equal during selection.
pub const SCORE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    #[default]
    PerGroup,
    GlobalPerTechnique,
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::PerGroup => "per-group",
            SelectionMode::GlobalPerTechnique => "global-per-technique",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub techniques: BTreeMap<StepId, Vec<PromptTechnique>>,
    pub runs_per_technique: u32,
    pub sampling: SamplingParams,
    /// When set, every request carries a seed derived from this and its key.
    pub seed: Option<u64>,
    pub repair_reprompts: u32,
    pub selection: SelectionMode,
    pub table_scoring: TableScoring,
    pub prompt_options: PromptOptions,
    /// Score runs against annotations when available; off forces truth-free selection.
    pub use_truth: bool,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            techniques: StepId::ALL
                .iter()
                .map(|s| (*s, s.techniques().to_vec()))
                .collect(),
            runs_per_technique: 5,
            sampling: SamplingParams::default(),
            seed: None,
            repair_reprompts: 1,
            selection: SelectionMode::PerGroup,
            table_scoring: TableScoring::Aligned,
            prompt_options: PromptOptions::default(),
            use_truth: true,
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.runs_per_technique == 0 {
            return Err("runs_per_technique must be at least 1".into());
        }
        for step in StepId::ALL {
            let techs = self.techniques_for(step);
            if techs.is_empty() {
                return Err(format!("{step} has no prompting technique configured"));
            }
            for t in techs {
                if !step.admits(*t) {
                    return Err(format!("{t} is not admitted for {step}"));
                }
            }
            let mut sorted = techs.to_vec();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != techs.len() {
                return Err(format!("{step} lists a technique twice"));
            }
        }
        Ok(())
    }

    /// Configured techniques for a step, in registry order.
    pub fn techniques_for(&self, step: StepId) -> &[PromptTechnique] {
        self.techniques.get(&step).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepPayload {
    Step1 {
        step1: Step1Result,
        step12: EgocentrismResult,
    },
    Mentioned {
        table: CellTable<MentionLabel>,
    },
    Perception {
        table: CellTable<PerceptionLabel>,
    },
    Interpretation {
        table: CellTable<FactorSet>,
    },
}

impl StepPayload {
    /// Block form forwarded to later steps.
    pub fn render(&self) -> String {
        match self {
            StepPayload::Step1 { step1, step12 } => parser::render_step1(step1, step12),
            StepPayload::Mentioned { table } => parser::render_table(TableKind::Mentioned, table),
            StepPayload::Perception { table } => parser::render_table(TableKind::Perception, table),
            StepPayload::Interpretation { table } => {
                parser::render_table(TableKind::Interpretation, table)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRunRecord {
    pub group_id: String,
    pub step: StepId,
    pub technique: PromptTechnique,
    pub run_index: u32,
    /// First attempt followed by any repair re-prompts.
    pub completions: Vec<CompletionRecord>,
    pub parse: ParseOutcome<StepPayload>,
    pub score_vs_truth: Option<f64>,
    pub template_localized: bool,
}

impl StepRunRecord {
    pub fn final_completion(&self) -> &CompletionRecord {
        self.completions
            .last()
            .expect("at least one completion per run")
    }

    pub fn candidate(&self) -> Candidate {
        Candidate {
            technique: self.technique,
            run_index: self.run_index,
            parsed: self.parse.payload.is_some(),
            issues: self.parse.issues.len(),
            score: self.score_vs_truth,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub technique: PromptTechnique,
    pub run_index: u32,
    pub parsed: bool,
    pub issues: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SelectionError {
    #[error("a candidate run has no score")]
    Unscored,
    #[error("no candidate run produced a usable payload")]
    NoParsedRun,
}

/// Mean score per technique in registry order; failed runs count as zero.
pub fn technique_means(cands: &[Candidate]) -> Result<Vec<(PromptTechnique, f64)>, SelectionError> {
    let mut by_tech: BTreeMap<usize, (PromptTechnique, f64, usize)> = BTreeMap::new();
    for c in cands {
        let s = c.score.ok_or(SelectionError::Unscored)?;
        let s = if c.parsed { s } else { 0.0 };
        let e = by_tech
            .entry(c.technique.registry_rank())
            .or_insert((c.technique, 0.0, 0));
        e.1 += s;
        e.2 += 1;
    }
    Ok(by_tech
        .into_values()
        .map(|(t, sum, n)| (t, sum / n as f64))
        .collect())
}

/// Best parsed run of one technique: highest score, then lowest run index.
pub fn select_within(cands: &[Candidate], tech: PromptTechnique) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for c in cands.iter().filter(|c| c.technique == tech && c.parsed) {
        let s = c.score.unwrap_or(0.0);
        best = match best {
            None => Some((s, c.run_index)),
            Some((bs, _)) if s > bs + SCORE_TOLERANCE => Some((s, c.run_index)),
            Some((bs, br)) if (s - bs).abs() <= SCORE_TOLERANCE && c.run_index < br => {
                Some((bs, c.run_index))
            }
            keep => keep,
        };
    }
    best.map(|(_, r)| r)
}

/// Technique with the highest mean over its runs, then its best run.
///
/// Only techniques with at least one parsed run compete; ties go to registry order.
pub fn select_best(cands: &[Candidate]) -> Result<(PromptTechnique, u32), SelectionError> {
    let means = technique_means(cands)?;
    let mut best: Option<(PromptTechnique, f64)> = None;
    for (t, m) in means {
        if !cands.iter().any(|c| c.technique == t && c.parsed) {
            continue;
        }
        if best.is_none_or(|(_, bm)| m > bm + SCORE_TOLERANCE) {
            best = Some((t, m));
        }
    }
    let (tech, _) = best.ok_or(SelectionError::NoParsedRun)?;
    let run = select_within(cands, tech).ok_or(SelectionError::NoParsedRun)?;
    Ok((tech, run))
}

/// Selection without ground truth: fewest parse issues, then lowest run index,
/// then registry order.
pub fn select_truth_free(cands: &[Candidate]) -> Result<(PromptTechnique, u32), SelectionError> {
    cands
        .iter()
        .filter(|c| c.parsed)
        .min_by_key(|c| (c.issues, c.run_index, c.technique.registry_rank()))
        .map(|c| (c.technique, c.run_index))
        .ok_or(SelectionError::NoParsedRun)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionBasis {
    TruthScored,
    TruthFree,
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedStep {
    pub step: StepId,
    pub technique: PromptTechnique,
    pub run_index: u32,
    pub basis: SelectionBasis,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{group}/{step}: every run failed to parse")]
    AllRunsFailed { group: String, step: StepId },
    #[error("{group}/{step}: {source}")]
    Backend {
        group: String,
        step: StepId,
        #[source]
        source: BackendError,
    },
    #[error("{group}/{step}: {source}")]
    Prompt {
        group: String,
        step: StepId,
        #[source]
        source: PromptError,
    },
    #[error("{group}/{step}: {source}")]
    Store {
        group: String,
        step: StepId,
        #[source]
        source: StoreError,
    },
    #[error("{group}/{step}: {source}")]
    Selection {
        group: String,
        step: StepId,
        #[source]
        source: SelectionError,
    },
    #[error("invalid run configuration: {0}")]
    Config(String),
}

impl PipelineError {
    pub fn step(&self) -> Option<StepId> {
        match self {
            PipelineError::AllRunsFailed { step, .. }
            | PipelineError::Backend { step, .. }
            | PipelineError::Prompt { step, .. }
            | PipelineError::Store { step, .. }
            | PipelineError::Selection { step, .. } => Some(*step),
            PipelineError::Config(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub step: StepId,
    pub technique: PromptTechnique,
    pub run_index: u32,
    pub status: ParseStatus,
    pub issues: Vec<Issue>,
    pub payload: Option<StepPayload>,
    /// Run-store path of the completion the payload came from.
    pub record: String,
    pub response_sha256: String,
    pub repair_attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_vs_truth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_id: String,
    pub model_name: String,
    pub temperature: String,
    pub runs_per_technique: u32,
    pub selection_mode: SelectionMode,
    pub table_scoring: TableScoring,
    pub selected: Vec<SelectedStep>,
    pub template_localized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_language: Option<String>,
}

/// Selected payloads of one group, shaped like an annotation, plus every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionBundle {
    pub format_version: String,
    pub group_id: String,
    pub prediction: GroupAnnotation,
    pub provenance: Provenance,
    pub runs: Vec<RunEntry>,
}

impl ExtractionBundle {
    pub fn selected(&self, step: StepId) -> Option<&SelectedStep> {
        self.provenance.selected.iter().find(|s| s.step == step)
    }

    pub fn runs_of(&self, step: StepId) -> impl Iterator<Item = &RunEntry> + '_ {
        self.runs.iter().filter(move |r| r.step == step)
    }

    pub fn is_selected(&self, r: &RunEntry) -> bool {
        self.selected(r.step)
            .is_some_and(|s| s.technique == r.technique && s.run_index == r.run_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupFailure {
    pub group_id: String,
    pub step: Option<StepId>,
    pub error: String,
}

#[derive(Debug)]
pub struct CorpusRun {
    pub bundles: Vec<ExtractionBundle>,
    pub failures: Vec<GroupFailure>,
    pub records: Vec<StepRunRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupInput<'a> {
    pub transcript: &'a Transcript,
    pub truth: Option<&'a GroupAnnotation>,
}

impl<'a> GroupInput<'a> {
    pub fn from_corpus(c: &'a Corpus) -> Vec<GroupInput<'a>> {
        c.entries
            .iter()
            .map(|e| GroupInput {
                transcript: &e.transcript,
                truth: e.annotation.as_ref(),
            })
            .collect()
    }
}

struct GroupState<'a> {
    input: GroupInput<'a>,
    resolver: NameResolver,
    ctx: ChainContext,
    step1: Option<(Step1Result, EgocentrismResult)>,
    mentioned: Option<CellTable<MentionLabel>>,
    perception: Option<CellTable<PerceptionLabel>>,
    interpretation: Option<CellTable<FactorSet>>,
    selected: Vec<SelectedStep>,
    records: Vec<StepRunRecord>,
    failure: Option<PipelineError>,
}

impl<'a> GroupState<'a> {
    fn new(input: GroupInput<'a>) -> Self {
        GroupState {
            resolver: NameResolver::from_transcript(input.transcript),
            ctx: ChainContext::new(render_prompt_input(input.transcript)),
            input,
            step1: None,
            mentioned: None,
            perception: None,
            interpretation: None,
            selected: Vec::new(),
            records: Vec::new(),
            failure: None,
        }
    }

    fn id(&self) -> &str {
        &self.input.transcript.group_id
    }

    fn keys(&self) -> (&[String], &[String]) {
        let s1 = &self
            .step1
            .as_ref()
            .expect("step 1 committed before tables")
            .0;
        (&s1.participants, &s1.restaurants)
    }

    fn commit(&mut self, step: StepId, payload: StepPayload) {
        self.ctx.push(step, payload.render());
        match payload {
            StepPayload::Step1 { step1, step12 } => self.step1 = Some((step1, step12)),
            StepPayload::Mentioned { table } => self.mentioned = Some(table),
            StepPayload::Perception { table } => self.perception = Some(table),
            StepPayload::Interpretation { table } => self.interpretation = Some(table),
        }
    }
}

fn sha256_hex(text: &str) -> String {
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

fn derive_seed(base: u64, key: &RequestKey) -> u64 {
    let d = Sha256::digest(format!("{base}:{key}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub struct Pipeline<'c> {
    cfg: RunConfig,
    client: &'c Client,
    store: Option<RunStore>,
}

impl<'c> Pipeline<'c> {
    pub fn new(
        cfg: RunConfig,
        client: &'c Client,
        store: Option<RunStore>,
    ) -> Result<Self, PipelineError> {
        cfg.validate().map_err(PipelineError::Config)?;
        Ok(Pipeline { cfg, client, store })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn fetch(
        &self,
        key: RequestKey,
        bundle: &PromptBundle,
    ) -> Result<CompletionRecord, PipelineError> {
        let turns = ChatTurn::from_bundle(bundle);
        let mut params = self.cfg.sampling.clone();
        if let Some(base) = self.cfg.seed {
            params.request_seed = Some(derive_seed(base, &key));
        }
        let wrap_store = |source| PipelineError::Store {
            group: key.group_id.clone(),
            step: key.step,
            source,
        };
        if let Some(store) = &self.store {
            if let Some(rec) = store.load(&key).map_err(wrap_store)? {
                if rec.request.turns == turns && rec.request.params == params {
                    return Ok(rec);
                }
                tracing::warn!(%key, "stored request differs from the current prompt; re-sending");
            }
        }
        let req = ChatRequest {
            key: key.clone(),
            turns,
            params,
        };
        let rec = self
            .client
            .complete(req)
            .map_err(|source| PipelineError::Backend {
                group: key.group_id.clone(),
                step: key.step,
                source,
            })?;
        if let Some(store) = &self.store {
            store.save(&rec).map_err(wrap_store)?;
        }
        Ok(rec)
    }

    fn parse(&self, st: &GroupState<'_>, step: StepId, raw: &str) -> ParseOutcome<StepPayload> {
        let res = Some(&st.resolver);
        match step {
            StepId::Step1 => parser::parse_step1_with(raw, res)
                .map(|(step1, step12)| StepPayload::Step1 { step1, step12 }),
            StepId::Step2 => {
                let (r, c) = st.keys();
                parser::parse_mentioned(raw, r, c, res)
                    .map(|table| StepPayload::Mentioned { table })
            }
            StepId::Step3 => {
                let (r, c) = st.keys();
                parser::parse_perception(raw, r, c, res)
                    .map(|table| StepPayload::Perception { table })
            }
            StepId::Step4 => {
                let (r, c) = st.keys();
                parser::parse_interpretation(raw, r, c, res)
                    .map(|table| StepPayload::Interpretation { table })
            }
        }
    }

    fn score(&self, st: &GroupState<'_>, payload: Option<&StepPayload>) -> Option<f64> {
        let truth = st.input.truth.filter(|_| self.cfg.use_truth)?;
        let Some(p) = payload else {
            return Some(0.0);
        };
        let res = Some(&st.resolver);
        let mode = self.cfg.table_scoring;
        Some(match p {
            StepPayload::Step1 { step1, .. } => {
                metrics::score_step11(step1, &truth.step1, res).score
            }
            StepPayload::Mentioned { table } => {
                metrics::table_f1(table, &truth.mentioned, res, mode).f1
            }
            StepPayload::Perception { table } => {
                metrics::table_f1(table, &truth.perception, res, mode).f1
            }
            StepPayload::Interpretation { table } => {
                match metrics::step4_score(table, &truth.interpretation, res) {
                    Ok(s) => s.score,
                    // No positive truth cell: fall back to cell agreement.
                    Err(_) => metrics::table_f1(table, &truth.interpretation, res, mode).f1,
                }
            }
        })
    }

    fn execute_run(
        &self,
        st: &GroupState<'_>,
        step: StepId,
        tech: PromptTechnique,
        run: u32,
    ) -> Result<StepRunRecord, PipelineError> {
        let group = st.id().to_string();
        let (bundle, localized) =
            prompts::build_prompt_with(step, tech, &st.ctx, &self.cfg.prompt_options).map_err(
                |source| PipelineError::Prompt {
                    group: group.clone(),
                    step,
                    source,
                },
            )?;
        let mut key = RequestKey {
            group_id: group.clone(),
            step,
            technique: tech,
            run_index: run,
            attempt: 0,
        };
        let first = self.fetch(key.clone(), &bundle)?;
        let mut parse = self.parse(st, step, &first.response_text);
        let mut completions = vec![first];
        let repair = prompts::repair_prompt(&bundle);
        while parse.status == ParseStatus::Failed && key.attempt < self.cfg.repair_reprompts {
            key.attempt += 1;
            let rec = self.fetch(key.clone(), &repair)?;
            parse = self.parse(st, step, &rec.response_text);
            completions.push(rec);
        }
        let score_vs_truth = self.score(st, parse.payload.as_ref());
        Ok(StepRunRecord {
            group_id: group,
            step,
            technique: tech,
            run_index: run,
            completions,
            parse,
            score_vs_truth,
            template_localized: localized,
        })
    }

    fn uses_truth(&self, st: &GroupState<'_>) -> bool {
        self.cfg.use_truth && st.input.truth.is_some()
    }

    /// Extract every group; failures are isolated per group.
    pub fn run_corpus(&self, inputs: &[GroupInput<'_>]) -> CorpusRun {
        let mut states: Vec<GroupState<'_>> = inputs.iter().map(|i| GroupState::new(*i)).collect();
        for step in StepId::ALL {
            let techs = self.cfg.techniques_for(step);
            let jobs: Vec<(usize, PromptTechnique, u32)> = states
                .iter()
                .enumerate()
                .filter(|(_, s)| s.failure.is_none())
                .flat_map(|(gi, _)| {
                    techs.iter().flat_map(move |t| {
                        (0..self.cfg.runs_per_technique).map(move |r| (gi, *t, r))
                    })
                })
                .collect();
            let results = {
                let view = &states;
                self.cfg.execution.map(&jobs, |(gi, t, r)| {
                    (*gi, self.execute_run(&view[*gi], step, *t, *r))
                })
            };
            let mut per_group: BTreeMap<usize, Vec<StepRunRecord>> = BTreeMap::new();
            for (gi, res) in results {
                match res {
                    Ok(rec) => per_group.entry(gi).or_default().push(rec),
                    Err(e) => {
                        if states[gi].failure.is_none() {
                            states[gi].failure = Some(e);
                        }
                    }
                }
            }
            let global = self.global_choice(step, &states, &per_group);
            for (gi, recs) in per_group {
                let st = &mut states[gi];
                if st.failure.is_none() {
                    self.select_and_commit(st, step, recs, global);
                } else {
                    st.records.extend(recs);
                }
            }
            if let Some(store) = &self.store {
                if let Err(e) = store.write_manifest() {
                    tracing::warn!(error = %e, "could not rewrite run-store manifest");
                }
            }
        }
        self.finish(states)
    }

    fn global_choice(
        &self,
        step: StepId,
        states: &[GroupState<'_>],
        per_group: &BTreeMap<usize, Vec<StepRunRecord>>,
    ) -> Option<PromptTechnique> {
        if self.cfg.selection != SelectionMode::GlobalPerTechnique {
            return None;
        }
        let pooled: Vec<Candidate> = per_group
            .iter()
            .filter(|(gi, _)| states[**gi].failure.is_none() && self.uses_truth(&states[**gi]))
            .flat_map(|(_, recs)| recs.iter().map(StepRunRecord::candidate))
            .collect();
        let means = technique_means(&pooled).ok()?;
        let mut best: Option<(PromptTechnique, f64)> = None;
        for (t, m) in means {
            if best.is_none_or(|(_, bm)| m > bm + SCORE_TOLERANCE) {
                best = Some((t, m));
            }
        }
        tracing::info!(%step, technique = ?best.map(|b| b.0), "global technique choice");
        best.map(|b| b.0)
    }

    fn select_and_commit(
        &self,
        st: &mut GroupState<'_>,
        step: StepId,
        recs: Vec<StepRunRecord>,
        global: Option<PromptTechnique>,
    ) {
        let cands: Vec<Candidate> = recs.iter().map(StepRunRecord::candidate).collect();
        let group = st.id().to_string();
        let chosen = if !cands.iter().any(|c| c.parsed) {
            Err(PipelineError::AllRunsFailed { group, step })
        } else if self.uses_truth(st) {
            let scored = global
                .and_then(|t| select_within(&cands, t).map(|r| ((t, r), SelectionBasis::Global)));
            match scored {
                Some(s) => Ok(s),
                None => select_best(&cands)
                    .map(|s| (s, SelectionBasis::TruthScored))
                    .map_err(|source| PipelineError::Selection {
                        group,
                        step,
                        source,
                    }),
            }
        } else {
            select_truth_free(&cands)
                .map(|s| (s, SelectionBasis::TruthFree))
                .map_err(|source| PipelineError::Selection {
                    group,
                    step,
                    source,
                })
        };
        match chosen {
            Ok(((tech, run), basis)) => {
                let payload = recs
                    .iter()
                    .find(|r| r.technique == tech && r.run_index == run)
                    .and_then(|r| r.parse.payload.clone())
                    .expect("selected run has a payload");
                st.commit(step, payload);
                st.selected.push(SelectedStep {
                    step,
                    technique: tech,
                    run_index: run,
                    basis,
                });
            }
            Err(e) => st.failure = Some(e),
        }
        st.records.extend(recs);
    }

    fn finish(&self, states: Vec<GroupState<'_>>) -> CorpusRun {
        let mut out = CorpusRun {
            bundles: Vec::new(),
            failures: Vec::new(),
            records: Vec::new(),
        };
        for st in states {
            if let Some(e) = &st.failure {
                tracing::warn!(group = st.id(), error = %e, "group failed");
                out.failures.push(GroupFailure {
                    group_id: st.id().to_string(),
                    step: e.step(),
                    error: e.to_string(),
                });
                out.records.extend(st.records);
                continue;
            }
            let bundle = self.bundle(&st);
            out.bundles.push(bundle);
            out.records.extend(st.records);
        }
        out
    }

    fn bundle(&self, st: &GroupState<'_>) -> ExtractionBundle {
        let (step1, step12) = st.step1.clone().expect("complete group has step 1");
        let prediction = GroupAnnotation {
            step1,
            step12,
            mentioned: st.mentioned.clone().expect("complete group has step 2"),
            perception: st.perception.clone().expect("complete group has step 3"),
            interpretation: st
                .interpretation
                .clone()
                .expect("complete group has step 4"),
            mention_style: None,
        };
        let mut runs: Vec<RunEntry> = st
            .records
            .iter()
            .map(|r| {
                let fin = r.final_completion();
                RunEntry {
                    step: r.step,
                    technique: r.technique,
                    run_index: r.run_index,
                    status: r.parse.status,
                    issues: r.parse.issues.clone(),
                    payload: r.parse.payload.clone(),
                    record: record_path(&fin.request.key),
                    response_sha256: sha256_hex(&fin.response_text),
                    repair_attempts: r.completions.len() as u32 - 1,
                    score_vs_truth: r.score_vs_truth,
                }
            })
            .collect();
        runs.sort_by_key(|r| (r.step, r.technique.registry_rank(), r.run_index));
        ExtractionBundle {
            format_version: FORMAT_VERSION.to_string(),
            group_id: st.id().to_string(),
            prediction,
            provenance: Provenance {
                backend_id: self.client.backend_id(),
                model_name: self.cfg.sampling.model_name.clone(),
                temperature: self.cfg.sampling.temperature_label(),
                runs_per_technique: self.cfg.runs_per_technique,
                selection_mode: self.cfg.selection,
                table_scoring: self.cfg.table_scoring,
                selected: st.selected.clone(),
                template_localized: st.records.iter().any(|r| r.template_localized),
                reasoning_language: self.cfg.prompt_options.reasoning_language.clone(),
            },
            runs,
        }
    }

    /// Single-group convenience over [`Pipeline::run_corpus`].
    pub fn run_group(
        &self,
        t: &Transcript,
        truth: Option<&GroupAnnotation>,
    ) -> Result<ExtractionBundle, GroupFailure> {
        let mut run = self.run_corpus(&[GroupInput {
            transcript: t,
            truth,
        }]);
        match run.bundles.pop() {
            Some(b) => Ok(b),
            None => Err(run
                .failures
                .pop()
                .expect("a group either completes or fails")),
        }
    }
}

/// Write one `<group_id>.json` per bundle.
pub fn save_bundles(dir: &Path, bundles: &[ExtractionBundle]) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for b in bundles {
        write_json(&dir.join(format!("{}.json", b.group_id)), b)?;
    }
    Ok(())
}

/// Read every bundle in a directory, sorted by group id.
pub fn load_bundles(dir: &Path) -> Result<Vec<ExtractionBundle>, CorpusError> {
    let rd = std::fs::read_dir(dir).map_err(|source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut paths: Vec<_> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(&p).map_err(|source| CorpusError::Io {
            path: p.clone(),
            source,
        })?;
        let b: ExtractionBundle =
            serde_json::from_str(&text).map_err(|e| CorpusError::MalformedFile {
                group_id: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                detail: e.to_string(),
            })?;
        out.push(b);
    }
    out.sort_by(|a, b| a.group_id.cmp(&b.group_id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use PromptTechnique::*;

    fn cand(t: PromptTechnique, run: u32, score: f64) -> Candidate {
        Candidate {
            technique: t,
            run_index: run,
            parsed: true,
            issues: 0,
            score: Some(score),
        }
    }

    fn constant(t: PromptTechnique, mean: f64) -> Vec<Candidate> {
        (0..5).map(|r| cand(t, r, mean)).collect()
    }

    #[test]
    fn highest_mean_technique_wins() {
        let mut c = constant(Nd, 0.92);
        c.extend(constant(Zs, 0.96));
        c.extend(constant(Cot, 0.95));
        assert_eq!(select_best(&c).unwrap().0, Zs);

        let mut c = constant(Cot, 0.37);
        c.extend(constant(Sr, 0.40));
        c.extend(constant(Pd, 0.38));
        c.extend(constant(More, 0.39));
        assert_eq!(select_best(&c).unwrap(), (Sr, 0));
    }

    #[test]
    fn ties_go_to_lowest_run_then_registry_order() {
        let c: Vec<Candidate> = [0.8, 0.9, 0.9, 0.7, 0.85]
            .iter()
            .enumerate()
            .map(|(i, s)| cand(Cot, i as u32, *s))
            .collect();
        assert_eq!(select_best(&c).unwrap(), (Cot, 1));

        let mut c = constant(Sr, 0.99);
        c.extend(constant(Cot, 0.99));
        assert_eq!(select_best(&c).unwrap(), (Cot, 0));

        assert_eq!(select_best(&[cand(Pd, 0, 0.5)]).unwrap(), (Pd, 0));
    }

    #[test]
    fn failed_runs_count_zero_and_are_never_picked() {
        let mut c = vec![cand(Cot, 0, 0.6), cand(Cot, 1, 0.6)];
        c.push(Candidate {
            parsed: false,
            ..cand(Sr, 0, 0.0)
        });
        c.push(cand(Sr, 1, 1.0));
        // SR mean 0.5 < CoT mean 0.6
        assert_eq!(select_best(&c).unwrap(), (Cot, 0));
        let only_failed = vec![Candidate {
            parsed: false,
            ..cand(Sr, 0, 0.0)
        }];
        assert_eq!(select_best(&only_failed), Err(SelectionError::NoParsedRun));
        let unscored = vec![Candidate {
            score: None,
            ..cand(Cot, 0, 0.0)
        }];
        assert_eq!(select_best(&unscored), Err(SelectionError::Unscored));
    }

    #[test]
    fn truth_free_prefers_fewest_issues() {
        let c = vec![
            Candidate {
                issues: 2,
                ..cand(Cot, 0, 0.0)
            },
            Candidate {
                issues: 0,
                ..cand(Sr, 3, 0.0)
            },
            Candidate {
                issues: 0,
                ..cand(Pd, 1, 0.0)
            },
            Candidate {
                issues: 0,
                parsed: false,
                ..cand(More, 0, 0.0)
            },
        ];
        assert_eq!(select_truth_free(&c).unwrap(), (Pd, 1));
    }

    #[test]
    fn default_config_is_valid() {
        RunConfig::default().validate().unwrap();
        let mut bad = RunConfig::default();
        bad.techniques.insert(StepId::Step1, vec![Sr]);
        assert!(bad.validate().is_err());
        let zero = RunConfig {
            runs_per_technique: 0,
            ..RunConfig::default()
        };
        assert!(zero.validate().is_err());
    }
}
