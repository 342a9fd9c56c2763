//! Score tables, confusion matrices and mention-style strata.
//!
//! The per-run score rows are the single source for every score table: the
//! grids are a pure fold over them, so a persisted `scores.csv` reproduces the
//! grids without the bundles.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{
    self, ConfusionMatrix, MetricsError, OutputKind, ScoreSummary, StdKind, TableScoring,
};
use crate::model::{
    normalize_name, Chosen, Corpus, EgocentrismResult, Factor, FactorSet, GroupAnnotation,
    MentionStyle, NameResolver, PerceptionLabel, ResponseLabel, SuggestionLabel,
};
use crate::pipeline::{ExtractionBundle, RunEntry, StepPayload};
use crate::prompts::{PromptTechnique, StepId};

pub const SCORES_FILE: &str = "scores.csv";
pub const GRID_STEP1_FILE: &str = "grid_step1.csv";
pub const GRID_STEPS2_4_FILE: &str = "grid_steps2_4.csv";
pub const STRATA_FILE: &str = "strata.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const DELTA_FILE: &str = "delta.csv";

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no bundle pairs with a ground-truth group")]
    NoPairs,
    #[error("score file has no rows")]
    EmptyInput,
    #[error("{path}: line {line}: {detail}")]
    Malformed {
        path: PathBuf,
        line: u64,
        detail: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub std: StdKind,
    pub table_scoring: TableScoring,
    /// Pool confusion matrices over selected runs only instead of every run.
    pub selected_only: bool,
}

/// One scored output of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub group_id: String,
    pub step: StepId,
    pub output: OutputKind,
    pub technique: PromptTechnique,
    pub run: u32,
    pub score: f64,
    pub selected: bool,
    /// Mention style of the true chosen restaurant; Chosen rows only.
    pub mention_style: Option<MentionStyle>,
}

const SCORE_HEADER: [&str; 8] = [
    "group_id",
    "step",
    "output",
    "technique",
    "run",
    "score",
    "selected",
    "mention_style",
];

/// Column of a score grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GridColumn {
    Technique(PromptTechnique),
    /// Every run of every technique, pooled per group.
    Ave,
    /// The selected run per group.
    Selected,
}

impl GridColumn {
    pub fn label(self) -> String {
        match self {
            GridColumn::Technique(t) => t.code().to_string(),
            GridColumn::Ave => "Ave".to_string(),
            GridColumn::Selected => "Selected".to_string(),
        }
    }

    fn sort_key(self) -> (usize, usize) {
        match self {
            GridColumn::Technique(t) => (0, t.registry_rank()),
            GridColumn::Ave => (1, 0),
            GridColumn::Selected => (2, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub output: OutputKind,
    pub cells: BTreeMap<GridColumn, ScoreSummary>,
}

/// Output kinds as rows and techniques as columns, one grid per step family.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub name: &'static str,
    pub columns: Vec<GridColumn>,
    pub rows: Vec<GridRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub style: MentionStyle,
    pub runs: u64,
    pub incorrect: u64,
    pub error_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetadata {
    pub model_name: String,
    pub backend_id: String,
    pub temperature: String,
    pub selection_mode: String,
    pub table_scoring: TableScoring,
    pub std: StdKind,
    pub confusion_pooling: &'static str,
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Confusions {
    pub suggestion: ConfusionMatrix,
    pub response: ConfusionMatrix,
    pub perception: ConfusionMatrix,
    pub factor: ConfusionMatrix,
}

impl Confusions {
    fn new() -> Self {
        let names = |ls: Vec<&str>| ls.into_iter().map(str::to_string).collect::<Vec<_>>();
        Confusions {
            suggestion: ConfusionMatrix::empty(names(
                SuggestionLabel::ALL.iter().map(|l| l.as_str()).collect(),
            )),
            response: ConfusionMatrix::empty(names(
                ResponseLabel::ALL.iter().map(|l| l.as_str()).collect(),
            )),
            perception: ConfusionMatrix::empty(names(
                PerceptionLabel::ALL.iter().map(|l| l.as_str()).collect(),
            )),
            factor: ConfusionMatrix::empty(factor_alphabet()),
        }
    }

    pub fn iter(&self) -> [(&'static str, &ConfusionMatrix); 4] {
        [
            ("suggestion", &self.suggestion),
            ("response", &self.response),
            ("perception", &self.perception),
            ("factor", &self.factor),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ScoreRow>,
    pub grids: Vec<ScoreGrid>,
    pub confusions: Option<Confusions>,
    /// Absent when no truth group carries mention-style metadata.
    pub strata: Option<Vec<Stratum>>,
    pub spurious_factor_count: Option<u64>,
    pub issue_histogram: BTreeMap<String, u64>,
    pub metadata: Option<RunMetadata>,
}

fn factor_alphabet() -> Vec<String> {
    let mut v: Vec<String> = Factor::ALL.iter().map(|f| f.as_str().to_string()).collect();
    v.push("None".to_string());
    v
}

/// Pool one cell into the factor confusion matrix.
///
/// Shared factors land on the diagonal. Remaining truth factors pair in sorted
/// order with remaining predicted ones; unpaired truth factors go to `None`.
/// An empty truth cell counts once, against the smallest predicted factor.
pub fn record_factor_cell(m: &mut ConfusionMatrix, pred: FactorSet, truth: FactorSet) {
    let none = Factor::ALL.len();
    let idx = |f: Factor| {
        Factor::ALL
            .iter()
            .position(|x| *x == f)
            .expect("closed alphabet")
    };
    if truth.is_empty() {
        let col = pred.iter().next().map(idx).unwrap_or(none);
        m.record(none, col);
        return;
    }
    for f in truth.intersection(pred).iter() {
        m.record(idx(f), idx(f));
    }
    let mut spurious = pred.difference(truth).iter();
    for f in truth.difference(pred).iter() {
        let col = spurious.next().map(idx).unwrap_or(none);
        m.record(idx(f), col);
    }
}

fn label_for<L: Copy>(entries: &[crate::model::LabelEntry<L>], who: &str) -> Option<L> {
    let key = normalize_name(who);
    entries
        .iter()
        .find(|e| normalize_name(&e.participant) == key)
        .map(|e| e.label)
}

fn record_step12(c: &mut Confusions, pred: &EgocentrismResult, truth: &EgocentrismResult) {
    let s_idx = |l: SuggestionLabel| {
        SuggestionLabel::ALL
            .iter()
            .position(|x| *x == l)
            .expect("closed")
    };
    let r_idx = |l: ResponseLabel| {
        ResponseLabel::ALL
            .iter()
            .position(|x| *x == l)
            .expect("closed")
    };
    // A truth participant absent from the prediction counts as Moderate, as in parsing.
    for t in &truth.suggestions {
        let p = label_for(&pred.suggestions, &t.participant).unwrap_or(SuggestionLabel::Moderate);
        c.suggestion.record(s_idx(t.label), s_idx(p));
    }
    for t in &truth.responses {
        let p = label_for(&pred.responses, &t.participant).unwrap_or(ResponseLabel::Moderate);
        c.response.record(r_idx(t.label), r_idx(p));
    }
}

fn chosen_style(truth: &GroupAnnotation, resolver: &NameResolver) -> Option<MentionStyle> {
    let Chosen::Restaurant(name) = &truth.step1.chosen else {
        return None;
    };
    truth
        .mention_style
        .as_ref()?
        .iter()
        .find(|e| resolver.same(&e.restaurant, name))
        .map(|e| e.style)
}

struct Pair<'a> {
    bundle: &'a ExtractionBundle,
    truth: &'a GroupAnnotation,
    resolver: NameResolver,
}

fn pair<'a>(
    bundles: &'a [ExtractionBundle],
    truths: &'a Corpus,
) -> Result<Vec<Pair<'a>>, ReportError> {
    let mut out = Vec::new();
    for b in bundles {
        match truths.get(&b.group_id) {
            Some(e) => match &e.annotation {
                Some(truth) => out.push(Pair {
                    bundle: b,
                    truth,
                    resolver: NameResolver::from_transcript(&e.transcript),
                }),
                None => {
                    tracing::warn!(group = %b.group_id, "truth group has no annotation; skipped")
                }
            },
            None => tracing::warn!(group = %b.group_id, "no truth group with this id; skipped"),
        }
    }
    if out.is_empty() {
        return Err(ReportError::NoPairs);
    }
    out.sort_by(|a, b| a.bundle.group_id.cmp(&b.bundle.group_id));
    Ok(out)
}

fn run_order(r: &RunEntry) -> (StepId, usize, u32) {
    (r.step, r.technique.registry_rank(), r.run_index)
}

/// Scores of one run against the truth; a failed parse scores 0 everywhere.
fn score_run(
    run: &RunEntry,
    truth: &GroupAnnotation,
    resolver: &NameResolver,
    mode: TableScoring,
) -> Vec<(OutputKind, f64)> {
    let res = Some(resolver);
    let has_positive = truth.interpretation.cells().iter().any(|f| !f.is_empty());
    let Some(payload) = &run.payload else {
        return OutputKind::ALL
            .into_iter()
            .filter(|k| k.step() == run.step)
            .filter(|k| *k != OutputKind::Interpretation || has_positive)
            .map(|k| (k, 0.0))
            .collect();
    };
    match payload {
        StepPayload::Step1 { step1, step12 } => {
            let s11 = metrics::score_step11(step1, &truth.step1, res);
            let s12 = metrics::score_step12(step12, &truth.step12);
            vec![
                (OutputKind::Participants, s11.participants.f1),
                (OutputKind::Restaurants, s11.restaurants.f1),
                (OutputKind::Chosen, s11.chosen.f1),
                (OutputKind::Step11, s11.score),
                (OutputKind::Suggestion, s12.suggestions.f1),
                (OutputKind::Response, s12.responses.f1),
                (OutputKind::Step12, s12.score),
            ]
        }
        StepPayload::Mentioned { table } => {
            vec![(
                OutputKind::Mentioned,
                metrics::table_f1(table, &truth.mentioned, res, mode).f1,
            )]
        }
        StepPayload::Perception { table } => {
            vec![(
                OutputKind::Perception,
                metrics::table_f1(table, &truth.perception, res, mode).f1,
            )]
        }
        StepPayload::Interpretation { table } => {
            // Groups without a positive truth cell have no Positive-F1 and are left out.
            match metrics::step4_score(table, &truth.interpretation, res) {
                Ok(s) => vec![(OutputKind::Interpretation, s.score)],
                Err(_) => Vec::new(),
            }
        }
    }
}

/// Every per-run score row, ordered by group, step, technique, run and output.
pub fn score_rows(
    bundles: &[ExtractionBundle],
    truths: &Corpus,
    mode: TableScoring,
) -> Result<Vec<ScoreRow>, ReportError> {
    let pairs = pair(bundles, truths)?;
    Ok(rows_for(&pairs, mode))
}

fn rows_for(pairs: &[Pair<'_>], mode: TableScoring) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    for p in pairs {
        let style = chosen_style(p.truth, &p.resolver);
        let mut runs: Vec<&RunEntry> = p.bundle.runs.iter().collect();
        runs.sort_by_key(|r| run_order(r));
        for run in runs {
            let selected = p.bundle.is_selected(run);
            for (output, score) in score_run(run, p.truth, &p.resolver, mode) {
                rows.push(ScoreRow {
                    group_id: p.bundle.group_id.clone(),
                    step: run.step,
                    output,
                    technique: run.technique,
                    run: run.run_index,
                    score,
                    selected,
                    mention_style: style.filter(|_| output == OutputKind::Chosen),
                });
            }
        }
    }
    rows
}

const STEP1_OUTPUTS: [OutputKind; 5] = [
    OutputKind::Participants,
    OutputKind::Restaurants,
    OutputKind::Chosen,
    OutputKind::Suggestion,
    OutputKind::Response,
];

const STEP1_COMPOSITES: [OutputKind; 2] = [OutputKind::Step11, OutputKind::Step12];

const STEPS2_4_OUTPUTS: [OutputKind; 3] = [
    OutputKind::Mentioned,
    OutputKind::Perception,
    OutputKind::Interpretation,
];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-group means over the matching rows, then a summary across groups.
fn summarize_column<'a>(
    rows: impl Iterator<Item = &'a ScoreRow>,
    std: StdKind,
) -> Result<Option<ScoreSummary>, MetricsError> {
    let mut per_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        per_group
            .entry(r.group_id.as_str())
            .or_default()
            .push(r.score);
    }
    if per_group.is_empty() {
        return Ok(None);
    }
    let means: Vec<f64> = per_group.values().map(|v| mean(v)).collect();
    metrics::summarize(&means, std).map(Some)
}

fn build_grid(
    name: &'static str,
    outputs: &[OutputKind],
    rows: &[ScoreRow],
    std: StdKind,
) -> Result<Option<ScoreGrid>, MetricsError> {
    let relevant: Vec<&ScoreRow> = rows
        .iter()
        .filter(|r| outputs.contains(&r.output))
        .collect();
    if relevant.is_empty() {
        return Ok(None);
    }
    let techniques: BTreeSet<(usize, PromptTechnique)> = relevant
        .iter()
        .map(|r| (r.technique.registry_rank(), r.technique))
        .collect();
    let mut columns: Vec<GridColumn> = techniques
        .into_iter()
        .map(|(_, t)| GridColumn::Technique(t))
        .collect();
    columns.push(GridColumn::Ave);
    columns.push(GridColumn::Selected);
    columns.sort_by_key(|c| c.sort_key());
    let mut grid_rows = Vec::new();
    for &output in outputs {
        let of_kind: Vec<&ScoreRow> = relevant
            .iter()
            .copied()
            .filter(|r| r.output == output)
            .collect();
        if of_kind.is_empty() {
            continue;
        }
        let mut cells = BTreeMap::new();
        for &col in &columns {
            let s = match col {
                GridColumn::Technique(t) => {
                    summarize_column(of_kind.iter().copied().filter(|r| r.technique == t), std)?
                }
                GridColumn::Ave => summarize_column(of_kind.iter().copied(), std)?,
                GridColumn::Selected => {
                    summarize_column(of_kind.iter().copied().filter(|r| r.selected), std)?
                }
            };
            if let Some(s) = s {
                cells.insert(col, s);
            }
        }
        grid_rows.push(GridRow { output, cells });
    }
    Ok(Some(ScoreGrid {
        name,
        columns,
        rows: grid_rows,
    }))
}

/// Score grids folded from score rows alone.
pub fn fold_grids(rows: &[ScoreRow], std: StdKind) -> Result<Vec<ScoreGrid>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    let step1: Vec<OutputKind> = STEP1_OUTPUTS
        .iter()
        .chain(&STEP1_COMPOSITES)
        .copied()
        .collect();
    let mut out = Vec::new();
    if let Some(g) = build_grid("step1", &step1, rows, std)? {
        out.push(g);
    }
    if let Some(g) = build_grid("steps2_4", &STEPS2_4_OUTPUTS, rows, std)? {
        out.push(g);
    }
    Ok(out)
}

/// Chosen-restaurant error rates by the true restaurant's mention style.
pub fn fold_strata(rows: &[ScoreRow]) -> Option<Vec<Stratum>> {
    let mut acc: BTreeMap<MentionStyle, (u64, u64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.output == OutputKind::Chosen) {
        if let Some(style) = r.mention_style {
            let e = acc.entry(style).or_default();
            e.0 += 1;
            if r.score < 1.0 - crate::pipeline::SCORE_TOLERANCE {
                e.1 += 1;
            }
        }
    }
    if acc.is_empty() {
        return None;
    }
    Some(
        acc.into_iter()
            .map(|(style, (runs, incorrect))| Stratum {
                style,
                runs,
                incorrect,
                error_rate: incorrect as f64 / runs as f64,
            })
            .collect(),
    )
}

fn distinct(values: impl Iterator<Item = String>) -> String {
    let set: BTreeSet<String> = values.collect();
    set.into_iter().collect::<Vec<_>>().join(";")
}

pub fn build_report(
    bundles: &[ExtractionBundle],
    truths: &Corpus,
    opts: &ReportOptions,
) -> Result<EvaluationReport, ReportError> {
    let pairs = pair(bundles, truths)?;
    let rows = rows_for(&pairs, opts.table_scoring);
    let grids = fold_grids(&rows, opts.std)?;
    let strata = fold_strata(&rows);

    let mut conf = Confusions::new();
    let mut spurious = 0u64;
    let mut issues: BTreeMap<String, u64> = BTreeMap::new();
    for p in &pairs {
        let res = Some(&p.resolver);
        for run in &p.bundle.runs {
            for i in &run.issues {
                *issues.entry(i.code.as_str().to_string()).or_default() += 1;
            }
            if opts.selected_only && !p.bundle.is_selected(run) {
                continue;
            }
            let Some(payload) = &run.payload else {
                continue;
            };
            match payload {
                StepPayload::Step1 { step12, .. } => {
                    record_step12(&mut conf, step12, &p.truth.step12)
                }
                StepPayload::Mentioned { .. } => {}
                StepPayload::Perception { table } => {
                    let (aligned, _) = metrics::align(table, &p.truth.perception, res);
                    let m = metrics::confusion(
                        aligned.cells(),
                        p.truth.perception.cells(),
                        PerceptionLabel::ALL,
                    )?;
                    conf.perception.add(&m);
                }
                StepPayload::Interpretation { table } => {
                    let (aligned, _) = metrics::align(table, &p.truth.interpretation, res);
                    for (pc, tc) in aligned.cells().iter().zip(p.truth.interpretation.cells()) {
                        record_factor_cell(&mut conf.factor, *pc, *tc);
                        if tc.is_empty() && !pc.is_empty() {
                            spurious += 1;
                        }
                    }
                }
            }
        }
    }

    let prov = pairs.iter().map(|p| &p.bundle.provenance);
    let metadata = RunMetadata {
        model_name: distinct(prov.clone().map(|p| p.model_name.clone())),
        backend_id: distinct(prov.clone().map(|p| p.backend_id.clone())),
        temperature: distinct(prov.clone().map(|p| p.temperature.clone())),
        selection_mode: distinct(prov.map(|p| p.selection_mode.to_string())),
        table_scoring: opts.table_scoring,
        std: opts.std,
        confusion_pooling: if opts.selected_only {
            "selected runs"
        } else {
            "all runs"
        },
        groups: pairs.len(),
    };
    Ok(EvaluationReport {
        rows,
        grids,
        confusions: Some(conf),
        strata,
        spurious_factor_count: Some(spurious),
        issue_histogram: issues,
        metadata: Some(metadata),
    })
}

/// The report parts recoverable from a persisted score file.
pub fn report_from_rows(
    rows: Vec<ScoreRow>,
    std: StdKind,
) -> Result<EvaluationReport, ReportError> {
    let grids = fold_grids(&rows, std)?;
    let strata = fold_strata(&rows);
    Ok(EvaluationReport {
        rows,
        grids,
        confusions: None,
        strata,
        spurious_factor_count: None,
        issue_histogram: BTreeMap::new(),
        metadata: None,
    })
}

fn csv_bytes(header: &[String], records: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in records {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn scores_csv(rows: &[ScoreRow]) -> Vec<u8> {
    let header: Vec<String> = SCORE_HEADER.iter().map(|s| s.to_string()).collect();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.group_id.clone(),
                r.step.slug().to_string(),
                r.output.as_str().to_string(),
                r.technique.code().to_string(),
                r.run.to_string(),
                format!("{}", r.score),
                r.selected.to_string(),
                r.mention_style
                    .map(|s| s.as_str().to_string())
                    .unwrap_or_default(),
            ]
        })
        .collect();
    csv_bytes(&header, &records)
}

fn parse_output(s: &str) -> Option<OutputKind> {
    OutputKind::ALL.into_iter().find(|k| k.as_str() == s)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>, ReportError> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let bad = |line: u64, detail: String| ReportError::Malformed {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.iter().ne(SCORE_HEADER.iter().copied()) {
        if header.is_empty() {
            return Err(ReportError::EmptyInput);
        }
        return Err(bad(
            1,
            format!(
                "unexpected header `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let style = match field(7) {
            "" => None,
            s => Some(
                s.parse::<MentionStyle>()
                    .map_err(|e| bad(line, e.to_string()))?,
            ),
        };
        rows.push(ScoreRow {
            group_id: field(0).to_string(),
            step: field(1).parse().map_err(|e: String| bad(line, e))?,
            output: parse_output(field(2))
                .ok_or_else(|| bad(line, format!("unknown output `{}`", field(2))))?,
            technique: field(3).parse().map_err(|e: String| bad(line, e))?,
            run: field(4)
                .parse()
                .map_err(|e| bad(line, format!("run: {e}")))?,
            score: field(5)
                .parse()
                .map_err(|e| bad(line, format!("score: {e}")))?,
            selected: field(6)
                .parse()
                .map_err(|e| bad(line, format!("selected: {e}")))?,
            mention_style: style,
        });
    }
    if rows.is_empty() {
        return Err(ReportError::EmptyInput);
    }
    Ok(rows)
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub fn grid_csv(g: &ScoreGrid) -> Vec<u8> {
    let mut header = vec!["output".to_string()];
    for c in &g.columns {
        header.push(format!("{}_mean", c.label()));
        header.push(format!("{}_std", c.label()));
    }
    header.push("n".to_string());
    let records: Vec<Vec<String>> = g
        .rows
        .iter()
        .map(|r| {
            let mut rec = vec![r.output.as_str().to_string()];
            for c in &g.columns {
                match r.cells.get(c) {
                    Some(s) => {
                        rec.push(num(s.mean));
                        rec.push(num(s.std));
                    }
                    None => rec.extend([String::new(), String::new()]),
                }
            }
            let n = r.cells.get(&GridColumn::Ave).map_or(0, |s| s.n);
            rec.push(n.to_string());
            rec
        })
        .collect();
    csv_bytes(&header, &records)
}

pub fn confusion_csv(m: &ConfusionMatrix) -> Vec<u8> {
    let mut header = vec!["truth\\pred".to_string()];
    header.extend(m.labels.iter().cloned());
    let records: Vec<Vec<String>> = m
        .labels
        .iter()
        .zip(&m.counts)
        .map(|(l, row)| {
            std::iter::once(l.clone())
                .chain(row.iter().map(u64::to_string))
                .collect()
        })
        .collect();
    csv_bytes(&header, &records)
}

pub fn strata_csv(strata: &[Stratum]) -> Vec<u8> {
    let header: Vec<String> = ["mention_style", "runs", "incorrect", "error_rate"]
        .map(String::from)
        .to_vec();
    let records: Vec<Vec<String>> = strata
        .iter()
        .map(|s| {
            vec![
                s.style.as_str().to_string(),
                s.runs.to_string(),
                s.incorrect.to_string(),
                num(s.error_rate),
            ]
        })
        .collect();
    csv_bytes(&header, &records)
}

pub fn summary_text(r: &EvaluationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Evaluation summary");
    let _ = writeln!(s);
    if let Some(m) = &r.metadata {
        let _ = writeln!(s, "model: {}", m.model_name);
        let _ = writeln!(s, "backend: {}", m.backend_id);
        let _ = writeln!(s, "temperature: {}", m.temperature);
        let _ = writeln!(s, "selection mode: {}", m.selection_mode);
        let _ = writeln!(s, "table scoring: {}", m.table_scoring);
        let _ = writeln!(s, "std convention: {}", m.std);
        let _ = writeln!(s, "confusion pooling: {}", m.confusion_pooling);
        let _ = writeln!(s, "groups: {}", m.groups);
        let _ = writeln!(s);
    }
    for g in &r.grids {
        let _ = writeln!(s, "Scores ({})", g.name);
        let mut line = format!("{:<22}", "");
        for c in &g.columns {
            let _ = write!(line, "{:>14}", c.label());
        }
        let _ = writeln!(s, "{}", line.trim_end());
        for row in &g.rows {
            let mut line = format!("{:<22}", row.output.as_str());
            for c in &g.columns {
                let cell = match row.cells.get(c) {
                    Some(x) => format!("{:.2} ({:.2})", x.mean, x.std),
                    None => "-".to_string(),
                };
                let _ = write!(line, "{cell:>14}");
            }
            let _ = writeln!(s, "{line}");
        }
        let _ = writeln!(s);
    }
    if let Some(strata) = &r.strata {
        let _ = writeln!(s, "Chosen restaurant errors by mention style");
        for st in strata {
            let _ = writeln!(
                s,
                "{:<22}{:>6} / {:<6}{:>8.1}%",
                st.style.as_str(),
                st.incorrect,
                st.runs,
                st.error_rate * 100.0
            );
        }
        let _ = writeln!(s);
    }
    if let Some(c) = &r.confusions {
        for (name, m) in c.iter() {
            let _ = writeln!(s, "Confusion ({name}; rows are ground truth)");
            let mut head = format!("{:<14}", "");
            for l in &m.labels {
                let _ = write!(head, "{l:>14}");
            }
            let _ = writeln!(s, "{}", head.trim_end());
            for (l, row) in m.labels.iter().zip(&m.counts) {
                let mut line = format!("{l:<14}");
                for x in row {
                    let _ = write!(line, "{x:>14}");
                }
                let _ = writeln!(s, "{line}");
            }
            let _ = writeln!(s);
        }
    }
    if let Some(n) = r.spurious_factor_count {
        let _ = writeln!(s, "spurious factor cells: {n}");
    }
    if !r.issue_histogram.is_empty() {
        let _ = writeln!(s, "parse issues:");
        for (k, v) in &r.issue_histogram {
            let _ = writeln!(s, "  {k}: {v}");
        }
    }
    s
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(io_at(&path))?;
    Ok(path)
}

/// Write every artifact of the report into `dir`; returns the written paths.
pub fn export(r: &EvaluationReport, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    let mut out = vec![write_file(dir, SCORES_FILE, &scores_csv(&r.rows))?];
    for g in &r.grids {
        let name = if g.name == "step1" {
            GRID_STEP1_FILE
        } else {
            GRID_STEPS2_4_FILE
        };
        out.push(write_file(dir, name, &grid_csv(g))?);
    }
    if let Some(c) = &r.confusions {
        for (name, m) in c.iter() {
            out.push(write_file(
                dir,
                &format!("confusion_{name}.csv"),
                &confusion_csv(m),
            )?);
        }
    }
    if let Some(s) = &r.strata {
        out.push(write_file(dir, STRATA_FILE, &strata_csv(s))?);
    }
    out.push(write_file(dir, SUMMARY_FILE, summary_text(r).as_bytes())?);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub output: OutputKind,
    pub column: GridColumn,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
}

/// `mean_b − mean_a` for every cell present in both reports.
pub fn compare(a: &[ScoreGrid], b: &[ScoreGrid]) -> Vec<DeltaRow> {
    let cells = |gs: &[ScoreGrid]| -> BTreeMap<(OutputKind, (usize, usize), GridColumn), f64> {
        gs.iter()
            .flat_map(|g| g.rows.iter())
            .flat_map(|r| {
                r.cells
                    .iter()
                    .map(move |(c, s)| ((r.output, c.sort_key(), *c), s.mean))
            })
            .collect()
    };
    let (ca, cb) = (cells(a), cells(b));
    ca.iter()
        .filter_map(|(k, ma)| {
            cb.get(k).map(|mb| DeltaRow {
                output: k.0,
                column: k.2,
                mean_a: *ma,
                mean_b: *mb,
                delta: mb - ma,
            })
        })
        .collect()
}

pub fn delta_csv(rows: &[DeltaRow]) -> Vec<u8> {
    let header: Vec<String> = ["output", "column", "mean_a", "mean_b", "delta"]
        .map(String::from)
        .to_vec();
    let records: Vec<Vec<String>> = rows
        .iter()
        .map(|d| {
            vec![
                d.output.as_str().to_string(),
                d.column.label(),
                num(d.mean_a),
                num(d.mean_b),
                num(d.delta),
            ]
        })
        .collect();
    csv_bytes(&header, &records)
}
