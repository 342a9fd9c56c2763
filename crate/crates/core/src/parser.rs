//! Reads model responses into typed step payloads.
//!
//! The grammar is reconstructed from the output-format sections of the prompts:
//! step 1 answers are located by the `<Participant Lists>`-style markers, steps
//! 2–4 by their table name followed by a pipe table. The last occurrence wins,
//! since self-refinement answers print a draft before the final version.
//! Parsing never panics; everything that goes wrong is reported as an [`Issue`].

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{
    normalize_name, CellTable, CellValue, Chosen, EgocentrismResult, FactorSet, LabelEntry,
    MentionLabel, NameResolver, PerceptionLabel, Resolution, ResponseLabel, Step1Result,
    SuggestionLabel, Transcript,
};
use crate::prompts::StepId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IssueCode {
    InvalidLabel,
    ExtraEntity,
    MissingEntity,
    NoBlockFound,
    DuplicateMention,
    UnresolvedName,
}

impl IssueCode {
    pub const ALL: [IssueCode; 6] = [
        IssueCode::InvalidLabel,
        IssueCode::ExtraEntity,
        IssueCode::MissingEntity,
        IssueCode::NoBlockFound,
        IssueCode::DuplicateMention,
        IssueCode::UnresolvedName,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IssueCode::InvalidLabel => "InvalidLabel",
            IssueCode::ExtraEntity => "ExtraEntity",
            IssueCode::MissingEntity => "MissingEntity",
            IssueCode::NoBlockFound => "NoBlockFound",
            IssueCode::DuplicateMention => "DuplicateMention",
            IssueCode::UnresolvedName => "UnresolvedName",
        }
    }

    /// Fatal issues make the whole parse fail.
    pub fn is_fatal(self) -> bool {
        matches!(self, IssueCode::InvalidLabel | IssueCode::NoBlockFound)
    }
}

impl fmt::Display for IssueCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: IssueCode,
    pub location: String,
    pub detail: String,
}

impl Issue {
    fn new(code: IssueCode, location: impl Into<String>, detail: impl Into<String>) -> Self {
        Issue {
            code,
            location: location.into(),
            detail: detail.into(),
        }
    }

    fn is_fatal(&self) -> bool {
        self.code.is_fatal()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParseStatus {
    Ok,
    Repaired,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome<T> {
    pub payload: Option<T>,
    pub status: ParseStatus,
    pub issues: Vec<Issue>,
}

impl<T> ParseOutcome<T> {
    /// Fatal issues drop the payload; otherwise any recorded issue marks it `Repaired`.
    fn assemble(payload: Option<T>, issues: Vec<Issue>) -> Self {
        let payload = if issues.iter().any(Issue::is_fatal) {
            None
        } else {
            payload
        };
        let status = match (&payload, issues.is_empty()) {
            (None, _) => ParseStatus::Failed,
            (Some(_), true) => ParseStatus::Ok,
            (Some(_), false) => ParseStatus::Repaired,
        };
        ParseOutcome {
            payload,
            status,
            issues,
        }
    }

    pub fn failed(issues: Vec<Issue>) -> Self {
        ParseOutcome {
            payload: None,
            status: ParseStatus::Failed,
            issues,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> ParseOutcome<U> {
        ParseOutcome {
            payload: self.payload.map(f),
            status: self.status,
            issues: self.issues,
        }
    }
}

pub const PARTICIPANT_MARKER: &str = "<Participant Lists>";
pub const RESTAURANT_MARKER: &str = "<Restaurant Lists>";
pub const CHOSEN_MARKER: &str = "<Chosen Restaurant>";
pub const SUGGESTION_MARKER: &str = "<Suggestion Lists>";
pub const RESPONSE_MARKER: &str = "<Response Lists>";

const STEP1_MARKERS: [&str; 5] = [
    PARTICIPANT_MARKER,
    RESTAURANT_MARKER,
    CHOSEN_MARKER,
    SUGGESTION_MARKER,
    RESPONSE_MARKER,
];

pub const NOT_SPECIFIED: &str = "Not specified";

/// Which table a step 2–4 answer carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableKind {
    Mentioned,
    Perception,
    Interpretation,
}

impl TableKind {
    pub fn step(self) -> StepId {
        match self {
            TableKind::Mentioned => StepId::Step2,
            TableKind::Perception => StepId::Step3,
            TableKind::Interpretation => StepId::Step4,
        }
    }

    pub fn for_step(step: StepId) -> Option<TableKind> {
        match step {
            StepId::Step1 => None,
            StepId::Step2 => Some(TableKind::Mentioned),
            StepId::Step3 => Some(TableKind::Perception),
            StepId::Step4 => Some(TableKind::Interpretation),
        }
    }

    /// Marker written by [`render_table`].
    pub fn marker(self) -> &'static str {
        match self {
            TableKind::Mentioned => "<Mentioned Table>",
            TableKind::Perception => "<Perception Table>",
            TableKind::Interpretation => "<Interpretation Table>",
        }
    }

    fn markers(self) -> &'static [&'static str] {
        match self {
            TableKind::Mentioned => &["<Mentioned Table>", "MentionedTable", "Mentioned Table"],
            TableKind::Perception => &["<Perception Table>", "PerceptionTable", "Perception Table"],
            TableKind::Interpretation => &[
                "<Interpretation Table>",
                "InterpretationTable",
                "Interpretation Table",
            ],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TableKind::Mentioned => "MentionedTable",
            TableKind::Perception => "PerceptionTable",
            TableKind::Interpretation => "InterpretationTable",
        }
    }
}

// ---------------------------------------------------------------------------
// text helpers

/// Byte offsets of every ASCII-case-insensitive occurrence of `needle`.
fn find_all_ci(hay: &str, needle: &str) -> Vec<usize> {
    let h = hay.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || h.len() < n.len() {
        return Vec::new();
    }
    (0..=h.len() - n.len())
        .filter(|&i| h[i..i + n.len()].eq_ignore_ascii_case(n))
        .collect()
}

fn rfind_ci(hay: &str, needle: &str) -> Option<usize> {
    find_all_ci(hay, needle).pop()
}

fn strip_decoration(s: &str) -> &str {
    s.trim()
        .trim_matches(|c: char| c == '*' || c == '`' || c == '"' || c == '「' || c == '」')
        .trim()
}

/// Removes a list bullet or enumeration prefix. Returns whether one was present.
fn strip_bullet(line: &str) -> (bool, &str) {
    let t = line.trim_start();
    for b in ["- ", "* ", "• ", "・", "+ "] {
        if let Some(rest) = t.strip_prefix(b) {
            return (true, rest.trim());
        }
    }
    let digits = t.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        for sep in [". ", ") "] {
            if let Some(r) = rest.strip_prefix(sep) {
                return (true, r.trim());
            }
        }
    }
    (false, t.trim())
}

fn split_items(line: &str) -> Vec<String> {
    line.split([',', '、', '，'])
        .map(|s| strip_decoration(s).to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Items of a block: bullet lines are one item each, plain lines are comma lists.
fn block_items(content: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in content.lines() {
        let line = strip_decoration(line);
        if line.is_empty() {
            continue;
        }
        let (bullet, rest) = strip_bullet(line);
        if bullet {
            let item = strip_decoration(rest);
            if !item.is_empty() {
                out.push(item.to_string());
            }
        } else {
            out.extend(split_items(rest));
        }
    }
    out
}

/// Text following a marker up to the next marker, a blank line after content,
/// or a heading.
fn block_content<'a>(raw: &'a str, start: usize, markers: &[usize]) -> &'a str {
    let end = markers
        .iter()
        .copied()
        .filter(|&m| m >= start)
        .min()
        .unwrap_or(raw.len());
    let body = &raw[start..end];
    let body = body.trim_start_matches(|c: char| c == '*' || c == ':' || c == '：' || c == ' ');
    let mut taken = 0usize;
    let mut seen_content = false;
    for line in body.split_inclusive('\n') {
        let t = line.trim();
        if t.is_empty() {
            if seen_content {
                break;
            }
        } else if t.starts_with('#') || t.to_ascii_lowercase().starts_with("output for step") {
            break;
        } else {
            seen_content = true;
        }
        taken += line.len();
    }
    &body[..taken]
}

fn dedupe(items: Vec<String>, location: &str, issues: &mut Vec<Issue>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for it in items {
        if seen.insert(normalize_name(&it)) {
            out.push(it);
        } else {
            issues.push(Issue::new(
                IssueCode::ExtraEntity,
                location,
                format!("duplicate entry `{it}` dropped"),
            ));
        }
    }
    out
}

fn split_pair(segment: &str) -> Option<(String, String)> {
    let seg = strip_decoration(segment);
    let idx = seg.rfind([':', '：', '='])?;
    let sep_len = seg[idx..].chars().next()?.len_utf8();
    let name = strip_decoration(&seg[..idx]);
    let label = strip_decoration(&seg[idx + sep_len..]);
    let label = label.trim_end_matches(['.', '。']);
    if name.is_empty() {
        return None;
    }
    Some((name.to_string(), label.to_string()))
}

fn pair_segments(content: &str) -> Vec<String> {
    let mut out = Vec::new();
    for line in content.lines() {
        let line = strip_decoration(line);
        if line.is_empty() {
            continue;
        }
        let (bullet, rest) = strip_bullet(line);
        let colons = rest.matches([':', '：', '=']).count();
        if !bullet && colons > 1 {
            out.extend(
                rest.split([',', '、', '，', ';'])
                    .map(|s| s.trim().to_string()),
            );
        } else {
            out.push(rest.to_string());
        }
    }
    out.retain(|s| !s.is_empty());
    out
}

fn parse_label_block<L: std::str::FromStr + Copy>(
    content: &str,
    location: &str,
    participants: &[String],
    fill: L,
    issues: &mut Vec<Issue>,
) -> Vec<LabelEntry<L>> {
    let mut found: Vec<Option<L>> = vec![None; participants.len()];
    for seg in pair_segments(content) {
        let Some((name, label_text)) = split_pair(&seg) else {
            issues.push(Issue::new(
                IssueCode::InvalidLabel,
                location,
                format!("cannot read `participant: label` from `{seg}`"),
            ));
            continue;
        };
        let Ok(label) = label_text.parse::<L>() else {
            issues.push(Issue::new(
                IssueCode::InvalidLabel,
                location,
                format!("`{label_text}` for `{name}` is outside the label set"),
            ));
            continue;
        };
        let key = normalize_name(&name);
        match participants.iter().position(|p| normalize_name(p) == key) {
            Some(i) if found[i].is_none() => found[i] = Some(label),
            Some(_) => issues.push(Issue::new(
                IssueCode::ExtraEntity,
                location,
                format!("second label for `{name}` dropped"),
            )),
            None => issues.push(Issue::new(
                IssueCode::ExtraEntity,
                location,
                format!("`{name}` is not in the participant list"),
            )),
        }
    }
    participants
        .iter()
        .zip(found)
        .map(|(p, l)| {
            let label = l.unwrap_or_else(|| {
                issues.push(Issue::new(
                    IssueCode::MissingEntity,
                    location,
                    format!("no label for `{p}`; filled with Moderate"),
                ));
                fill
            });
            LabelEntry::new(p.clone(), label)
        })
        .collect()
}

fn parse_chosen(content: &str) -> Option<Chosen> {
    let first = block_items(content).into_iter().next().or_else(|| {
        let t = strip_decoration(content.lines().find(|l| !l.trim().is_empty())?);
        Some(t.to_string())
    })?;
    let cleaned = first.trim_end_matches(['.', '。']).trim();
    if cleaned.is_empty() {
        return None;
    }
    if cleaned.eq_ignore_ascii_case(NOT_SPECIFIED) {
        return Some(Chosen::NotSpecified);
    }
    Some(Chosen::Restaurant(cleaned.to_string()))
}

// ---------------------------------------------------------------------------
// step 1

pub type Step1Payload = (Step1Result, EgocentrismResult);

pub fn parse_step1(raw: &str) -> ParseOutcome<Step1Payload> {
    parse_step1_with(raw, None)
}

/// Parse step 1; with a resolver, restaurant references are mapped to canonical
/// names and unknown ones reported as `UnresolvedName`.
pub fn parse_step1_with(raw: &str, resolver: Option<&NameResolver>) -> ParseOutcome<Step1Payload> {
    let mut issues = Vec::new();
    let all_markers: Vec<usize> = STEP1_MARKERS
        .iter()
        .flat_map(|m| find_all_ci(raw, m))
        .collect();
    let mut blocks: Vec<Option<&str>> = Vec::with_capacity(5);
    for m in STEP1_MARKERS {
        match rfind_ci(raw, m) {
            Some(pos) => {
                let start = pos + m.len();
                blocks.push(Some(block_content(raw, start, &all_markers)));
            }
            None => {
                issues.push(Issue::new(
                    IssueCode::NoBlockFound,
                    m,
                    format!("no {m} block in the response"),
                ));
                blocks.push(None);
            }
        }
    }
    if blocks.iter().any(Option::is_none) {
        return ParseOutcome::failed(issues);
    }
    let b: Vec<&str> = blocks.into_iter().flatten().collect();

    let participants = dedupe(block_items(b[0]), PARTICIPANT_MARKER, &mut issues);
    let mut restaurants = block_items(b[1]);
    let mut chosen = match parse_chosen(b[2]) {
        Some(c) => c,
        None => {
            issues.push(Issue::new(
                IssueCode::NoBlockFound,
                CHOSEN_MARKER,
                "chosen restaurant block is empty",
            ));
            Chosen::NotSpecified
        }
    };
    if let Some(res) = resolver {
        for r in restaurants.iter_mut() {
            match res.resolve(r) {
                Resolution::Canonical(c) => *r = c,
                Resolution::Unresolved => issues.push(Issue::new(
                    IssueCode::UnresolvedName,
                    RESTAURANT_MARKER,
                    format!("`{r}` does not match the information part"),
                )),
            }
        }
        if let Chosen::Restaurant(name) = &chosen {
            match res.resolve(name) {
                Resolution::Canonical(c) => chosen = Chosen::Restaurant(c),
                Resolution::Unresolved => issues.push(Issue::new(
                    IssueCode::UnresolvedName,
                    CHOSEN_MARKER,
                    format!("`{name}` does not match the information part"),
                )),
            }
        }
    }
    let restaurants = dedupe(restaurants, RESTAURANT_MARKER, &mut issues);

    let suggestions = parse_label_block(
        b[3],
        SUGGESTION_MARKER,
        &participants,
        SuggestionLabel::Moderate,
        &mut issues,
    );
    let responses = parse_label_block(
        b[4],
        RESPONSE_MARKER,
        &participants,
        ResponseLabel::Moderate,
        &mut issues,
    );
    ParseOutcome::assemble(
        Some((
            Step1Result {
                participants,
                restaurants,
                chosen,
            },
            EgocentrismResult {
                suggestions,
                responses,
            },
        )),
        issues,
    )
}

/// Labeled-block form of a step 1 payload; [`parse_step1`] reads it back.
pub fn render_step1(s1: &Step1Result, s12: &EgocentrismResult) -> String {
    let mut out = String::new();
    out.push_str(PARTICIPANT_MARKER);
    out.push('\n');
    for p in &s1.participants {
        out.push_str(&format!("- {p}\n"));
    }
    out.push_str(RESTAURANT_MARKER);
    out.push('\n');
    for r in &s1.restaurants {
        out.push_str(&format!("- {r}\n"));
    }
    out.push_str(CHOSEN_MARKER);
    out.push('\n');
    match &s1.chosen {
        Chosen::Restaurant(r) => out.push_str(&format!("- {r}\n")),
        Chosen::NotSpecified => out.push_str(&format!("- {NOT_SPECIFIED}\n")),
    }
    out.push_str(SUGGESTION_MARKER);
    out.push('\n');
    for e in &s12.suggestions {
        out.push_str(&format!("- {}: {}\n", e.participant, e.label));
    }
    out.push_str(RESPONSE_MARKER);
    out.push('\n');
    for e in &s12.responses {
        out.push_str(&format!("- {}: {}\n", e.participant, e.label));
    }
    out
}

// ---------------------------------------------------------------------------
// tables

struct RawTable {
    start: usize,
    header: Vec<String>,
    body: Vec<Vec<String>>,
}

fn split_pipe_row(line: &str) -> Vec<String> {
    let t = line.trim();
    let t = t.strip_prefix('|').unwrap_or(t);
    let t = t
        .strip_suffix('|')
        .filter(|s| !s.ends_with('\\'))
        .unwrap_or(t);
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = t.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                cur.push('|');
                chars.next();
            }
            '|' => cells.push(std::mem::take(&mut cur)),
            c => cur.push(c),
        }
    }
    cells.push(cur);
    cells.into_iter().map(|c| c.trim().to_string()).collect()
}

fn is_separator_row(cells: &[String]) -> bool {
    !cells.is_empty()
        && cells.iter().all(|c| {
            let c = c.trim();
            !c.is_empty() && c.chars().all(|ch| matches!(ch, '-' | ':' | ' '))
        })
}

fn find_tables(raw: &str) -> Vec<RawTable> {
    let mut tables = Vec::new();
    let mut offset = 0usize;
    let mut cur: Option<RawTable> = None;
    for line in raw.split_inclusive('\n') {
        let t = line.trim();
        if t.starts_with('|') {
            let cells = split_pipe_row(t);
            match cur.as_mut() {
                None => {
                    cur = Some(RawTable {
                        start: offset,
                        header: cells,
                        body: Vec::new(),
                    })
                }
                Some(tab) => {
                    if !is_separator_row(&cells) {
                        tab.body.push(cells);
                    }
                }
            }
        } else if let Some(tab) = cur.take() {
            tables.push(tab);
        }
        offset += line.len();
    }
    if let Some(tab) = cur {
        tables.push(tab);
    }
    tables
}

fn clean_cell(c: &str) -> String {
    c.replace(['*', '`'], "")
        .trim()
        .trim_matches('"')
        .trim()
        .to_string()
}

fn match_keys(
    found: &[String],
    expected: &[String],
    resolver: Option<&NameResolver>,
    axis: &str,
    issues: &mut Vec<Issue>,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; expected.len()];
    let mut out = Vec::with_capacity(found.len());
    for f in found {
        let name = clean_cell(f);
        let key = normalize_name(&name);
        let hit = expected
            .iter()
            .position(|e| normalize_name(e) == key)
            .or_else(|| {
                let r = resolver?;
                expected.iter().position(|e| r.same(e, &name))
            });
        match hit {
            Some(i) if !taken[i] => {
                taken[i] = true;
                out.push(Some(i));
            }
            _ => {
                issues.push(Issue::new(
                    IssueCode::ExtraEntity,
                    axis,
                    format!("unexpected {axis} `{name}` dropped"),
                ));
                out.push(None);
            }
        }
    }
    for (i, t) in taken.iter().enumerate() {
        if !t {
            issues.push(Issue::new(
                IssueCode::MissingEntity,
                axis,
                format!(
                    "{axis} `{}` missing; filled with the neutral value",
                    expected[i]
                ),
            ));
        }
    }
    out
}

fn parse_oriented<L: CellValue>(
    tab: &RawTable,
    rows: &[String],
    cols: &[String],
    kind: TableKind,
    resolver: Option<&NameResolver>,
    transposed: bool,
) -> ParseOutcome<CellTable<L>> {
    let mut issues = Vec::new();
    let header_keys: Vec<String> = tab.header.iter().skip(1).cloned().collect();
    let line_keys: Vec<String> = tab
        .body
        .iter()
        .map(|r| r.first().cloned().unwrap_or_default())
        .collect();
    // participants run down the rows unless transposed
    let (row_names, col_names) = if transposed {
        (&header_keys, &line_keys)
    } else {
        (&line_keys, &header_keys)
    };
    let row_map = match_keys(row_names, rows, None, "participant", &mut issues);
    let col_map = match_keys(col_names, cols, resolver, "restaurant", &mut issues);

    let mut table = CellTable::<L>::neutral(rows.to_vec(), cols.to_vec());
    let mut filled = vec![false; rows.len() * cols.len()];
    for (li, line) in tab.body.iter().enumerate() {
        for (hi, _) in header_keys.iter().enumerate() {
            let (ri, ci) = if transposed {
                (row_map[hi], col_map[li])
            } else {
                (row_map[li], col_map[hi])
            };
            let (Some(ri), Some(ci)) = (ri, ci) else {
                continue;
            };
            let Some(cell) = line.get(hi + 1) else {
                continue;
            };
            let text = clean_cell(cell);
            match L::parse_cell(&text) {
                Some(v) => {
                    table.set(ri, ci, v);
                    filled[ri * cols.len() + ci] = true;
                }
                None => issues.push(Issue::new(
                    IssueCode::InvalidLabel,
                    format!("{}[{}, {}]", kind.name(), rows[ri], cols[ci]),
                    format!("`{text}` is outside the label set"),
                )),
            }
        }
    }
    let missing_cells = filled.iter().filter(|f| !**f).count();
    let known_missing = row_map.iter().filter(|m| m.is_some()).count() < rows.len()
        || col_map.iter().filter(|m| m.is_some()).count() < cols.len();
    if missing_cells > 0 && !known_missing {
        issues.push(Issue::new(
            IssueCode::MissingEntity,
            kind.name(),
            format!("{missing_cells} empty cell(s) filled with the neutral value"),
        ));
    }
    ParseOutcome::assemble(Some(table), issues)
}

fn select_table_candidate<'a>(
    raw: &str,
    tables: &'a [RawTable],
    kind: TableKind,
) -> Option<&'a RawTable> {
    let marker_pos = kind.markers().iter().filter_map(|m| rfind_ci(raw, m)).max();
    let after: Option<&RawTable> =
        marker_pos.and_then(|p| tables.iter().rev().find(|t| t.start > p));
    after.or_else(|| tables.last())
}

/// Parse a participant × restaurant table onto the expected key grid.
pub fn parse_table<L: CellValue>(
    raw: &str,
    expect_rows: &[String],
    expect_cols: &[String],
    kind: TableKind,
    resolver: Option<&NameResolver>,
) -> ParseOutcome<CellTable<L>> {
    let tables = find_tables(raw);
    let Some(tab) = select_table_candidate(raw, &tables, kind) else {
        return ParseOutcome::failed(vec![Issue::new(
            IssueCode::NoBlockFound,
            kind.name(),
            format!("no {} found in the response", kind.name()),
        )]);
    };
    let normal = parse_oriented::<L>(tab, expect_rows, expect_cols, kind, resolver, false);
    if normal.issues.is_empty() {
        return normal;
    }
    // Same position, two readings: keep the one with fewer issues.
    let flipped = parse_oriented::<L>(tab, expect_rows, expect_cols, kind, resolver, true);
    if flipped.issues.len() < normal.issues.len() {
        flipped
    } else {
        normal
    }
}

pub fn parse_mentioned(
    raw: &str,
    rows: &[String],
    cols: &[String],
    resolver: Option<&NameResolver>,
) -> ParseOutcome<CellTable<MentionLabel>> {
    let mut out = parse_table::<MentionLabel>(raw, rows, cols, TableKind::Mentioned, resolver);
    if let Some(t) = &out.payload {
        let mut extra = Vec::new();
        for (j, col) in t.cols().iter().enumerate() {
            let n = t
                .column(j)
                .filter(|v| **v == MentionLabel::Mentioned)
                .count();
            if n > 1 {
                extra.push(Issue::new(
                    IssueCode::DuplicateMention,
                    format!("MentionedTable[{col}]"),
                    format!("{n} participants marked as first proposer"),
                ));
            }
        }
        if !extra.is_empty() {
            out.issues.extend(extra);
            out.status = ParseStatus::Repaired;
        }
    }
    out
}

pub fn parse_perception(
    raw: &str,
    rows: &[String],
    cols: &[String],
    resolver: Option<&NameResolver>,
) -> ParseOutcome<CellTable<PerceptionLabel>> {
    parse_table(raw, rows, cols, TableKind::Perception, resolver)
}

pub fn parse_interpretation(
    raw: &str,
    rows: &[String],
    cols: &[String],
    resolver: Option<&NameResolver>,
) -> ParseOutcome<CellTable<FactorSet>> {
    parse_table(raw, rows, cols, TableKind::Interpretation, resolver)
}

fn escape_pipe(s: &str) -> String {
    s.replace('|', "\\|")
}

/// Marker plus pipe table; [`parse_table`] reads it back.
pub fn render_table<L: CellValue>(kind: TableKind, table: &CellTable<L>) -> String {
    let mut out = String::new();
    out.push_str(kind.marker());
    out.push('\n');
    out.push_str("| Participant |");
    for c in table.cols() {
        out.push_str(&format!(" {} |", escape_pipe(c)));
    }
    out.push('\n');
    out.push('|');
    for _ in 0..=table.n_cols() {
        out.push_str("---|");
    }
    out.push('\n');
    for (i, r) in table.rows().iter().enumerate() {
        out.push_str(&format!("| {} |", escape_pipe(r)));
        for j in 0..table.n_cols() {
            out.push_str(&format!(" {} |", table.get(i, j)));
        }
        out.push('\n');
    }
    out
}

/// Look a reference up against the transcript's information part and aliases.
pub fn resolve_alias(name: &str, t: &Transcript) -> Resolution {
    NameResolver::from_transcript(t).resolve(name)
}
