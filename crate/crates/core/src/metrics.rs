//! Scoring: set F1, composite step scores, triplet table F1, Positive-F1,
//! confusion matrices and summaries.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::model::{
    normalize_name, CellTable, CellValue, Chosen, EgocentrismResult, FactorSet, GroupAnnotation,
    NameResolver, Step1Result,
};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no cell has a non-empty ground-truth factor set")]
    EmptyPositiveSet,
    #[error("label lists differ in length ({pred} predicted, {truth} truth)")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("label `{0}` is not in the alphabet")]
    LabelOutsideAlphabet(String),
    #[error("cannot summarize an empty score list")]
    EmptyInput,
    #[error("tables have different shapes")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PRF {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Both sets were empty; scored as zero.
    pub both_empty: bool,
}

impl PRF {
    pub fn from_counts(hits: usize, n_pred: usize, n_truth: usize) -> PRF {
        let precision = if n_pred == 0 {
            0.0
        } else {
            hits as f64 / n_pred as f64
        };
        let recall = if n_truth == 0 {
            0.0
        } else {
            hits as f64 / n_truth as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PRF {
            precision,
            recall,
            f1,
            both_empty: n_pred == 0 && n_truth == 0,
        }
    }
}

pub fn set_f1<T: Eq + Hash>(
    pred: impl IntoIterator<Item = T>,
    truth: impl IntoIterator<Item = T>,
) -> PRF {
    let pred: HashSet<T> = pred.into_iter().collect();
    let truth: HashSet<T> = truth.into_iter().collect();
    let hits = pred.intersection(&truth).count();
    PRF::from_counts(hits, pred.len(), truth.len())
}

fn restaurant_key(name: &str, resolver: Option<&NameResolver>) -> String {
    match resolver {
        Some(r) => normalize_name(&r.canonicalize(name)),
        None => normalize_name(name),
    }
}

fn chosen_key(c: &Chosen, resolver: Option<&NameResolver>) -> Option<String> {
    match c {
        Chosen::Restaurant(r) => Some(restaurant_key(r, resolver)),
        Chosen::NotSpecified => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step11Score {
    pub participants: PRF,
    pub restaurants: PRF,
    pub chosen: PRF,
    pub score: f64,
}

/// Step 1.1 composite from its three component F1s.
pub fn step11_composite(participants: f64, restaurants: f64, chosen: f64) -> f64 {
    (participants + restaurants + chosen) / 3.0
}

/// Step 1.2 composite from its two pair F1s.
pub fn step12_composite(suggestions: f64, responses: f64) -> f64 {
    (suggestions + responses) / 2.0
}

/// Mean of the participant, restaurant and chosen-restaurant F1s.
pub fn score_step11(
    pred: &Step1Result,
    truth: &Step1Result,
    resolver: Option<&NameResolver>,
) -> Step11Score {
    let participants = set_f1(
        pred.participants.iter().map(|p| normalize_name(p)),
        truth.participants.iter().map(|p| normalize_name(p)),
    );
    let restaurants = set_f1(
        pred.restaurants.iter().map(|r| restaurant_key(r, resolver)),
        truth
            .restaurants
            .iter()
            .map(|r| restaurant_key(r, resolver)),
    );
    // NotSpecified contributes an empty singleton, so it never matches.
    let chosen = set_f1(
        chosen_key(&pred.chosen, resolver),
        chosen_key(&truth.chosen, resolver),
    );
    Step11Score {
        participants,
        restaurants,
        chosen,
        score: step11_composite(participants.f1, restaurants.f1, chosen.f1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step12Score {
    pub suggestions: PRF,
    pub responses: PRF,
    pub score: f64,
}

/// Mean of the pair F1s over (participant, suggestion) and (participant, response).
pub fn score_step12(pred: &EgocentrismResult, truth: &EgocentrismResult) -> Step12Score {
    let suggestions = set_f1(
        pred.suggestions
            .iter()
            .map(|e| (normalize_name(&e.participant), e.label)),
        truth
            .suggestions
            .iter()
            .map(|e| (normalize_name(&e.participant), e.label)),
    );
    let responses = set_f1(
        pred.responses
            .iter()
            .map(|e| (normalize_name(&e.participant), e.label)),
        truth
            .responses
            .iter()
            .map(|e| (normalize_name(&e.participant), e.label)),
    );
    Step12Score {
        suggestions,
        responses,
        score: step12_composite(suggestions.f1, responses.f1),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub missing_rows: Vec<String>,
    pub missing_cols: Vec<String>,
    pub extra_rows: Vec<String>,
    pub extra_cols: Vec<String>,
    /// (predicted, truth) column names unified through the resolver.
    pub renamed_cols: Vec<(String, String)>,
}

impl AlignmentReport {
    pub fn is_empty(&self) -> bool {
        self.missing_rows.is_empty()
            && self.missing_cols.is_empty()
            && self.extra_rows.is_empty()
            && self.extra_cols.is_empty()
            && self.renamed_cols.is_empty()
    }

    pub fn missing_entities(&self) -> usize {
        self.missing_rows.len() + self.missing_cols.len()
    }

    pub fn extra_entities(&self) -> usize {
        self.extra_rows.len() + self.extra_cols.len()
    }
}

/// Reindex `pred` onto the key grid of `truth`.
pub fn align<L: CellValue>(
    pred: &CellTable<L>,
    truth: &CellTable<L>,
    resolver: Option<&NameResolver>,
) -> (CellTable<L>, AlignmentReport) {
    let mut report = AlignmentReport::default();
    let row_of: Vec<Option<usize>> = truth
        .rows()
        .iter()
        .map(|t| {
            let k = normalize_name(t);
            pred.rows().iter().position(|p| normalize_name(p) == k)
        })
        .collect();
    let mut col_of: Vec<Option<usize>> = Vec::with_capacity(truth.n_cols());
    for t in truth.cols() {
        let k = normalize_name(t);
        let exact = pred.cols().iter().position(|p| normalize_name(p) == k);
        let hit = exact.or_else(|| {
            let r = resolver?;
            let j = pred.cols().iter().position(|p| r.same(p, t))?;
            report
                .renamed_cols
                .push((pred.cols()[j].clone(), t.clone()));
            Some(j)
        });
        col_of.push(hit);
    }
    for (t, m) in truth.rows().iter().zip(&row_of) {
        if m.is_none() {
            report.missing_rows.push(t.clone());
        }
    }
    for (t, m) in truth.cols().iter().zip(&col_of) {
        if m.is_none() {
            report.missing_cols.push(t.clone());
        }
    }
    for (i, p) in pred.rows().iter().enumerate() {
        if !row_of.contains(&Some(i)) {
            report.extra_rows.push(p.clone());
        }
    }
    for (j, p) in pred.cols().iter().enumerate() {
        if !col_of.contains(&Some(j)) {
            report.extra_cols.push(p.clone());
        }
    }
    let mut out = CellTable::neutral(truth.rows().to_vec(), truth.cols().to_vec());
    for (i, ri) in row_of.iter().enumerate() {
        for (j, cj) in col_of.iter().enumerate() {
            if let (Some(pi), Some(pj)) = (ri, cj) {
                out.set(i, j, pred.get(*pi, *pj).clone());
            }
        }
    }
    (out, report)
}

fn triplets<L: CellValue>(
    t: &CellTable<L>,
    resolver: Option<&NameResolver>,
) -> Vec<(String, String, L)> {
    t.triplets()
        .map(|(p, r, l)| (normalize_name(p), restaurant_key(r, resolver), l.clone()))
        .collect()
}

/// Triplet-set F1 over the tables as predicted, without alignment.
pub fn score_table_raw<L: CellValue>(
    pred: &CellTable<L>,
    truth: &CellTable<L>,
    resolver: Option<&NameResolver>,
) -> PRF {
    set_f1(triplets(pred, resolver), triplets(truth, resolver))
}

/// Triplet-set F1 after aligning `pred` onto the truth grid.
pub fn score_table<L: CellValue>(
    pred: &CellTable<L>,
    truth: &CellTable<L>,
    resolver: Option<&NameResolver>,
) -> (PRF, AlignmentReport) {
    let (aligned, report) = align(pred, truth, resolver);
    (score_table_raw(&aligned, truth, None), report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositiveF1 {
    pub score: f64,
    /// Cells with a non-empty truth set.
    pub cells: usize,
    /// Cells with predicted factors where the truth set is empty.
    pub spurious: usize,
}

/// Positive-F1 over (predicted, truth) factor-set pairs.
pub fn positive_f1_cells<'a>(
    cells: impl IntoIterator<Item = (&'a FactorSet, &'a FactorSet)>,
) -> Result<PositiveF1, MetricsError> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut spurious = 0usize;
    for (pred, truth) in cells {
        if truth.is_empty() {
            if !pred.is_empty() {
                spurious += 1;
            }
            continue;
        }
        let hits = pred.intersection(*truth).len();
        sum += PRF::from_counts(hits, pred.len(), truth.len()).f1;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyPositiveSet);
    }
    Ok(PositiveF1 {
        score: sum / n as f64,
        cells: n,
        spurious,
    })
}

/// Positive-F1 over two tables on the same grid; align first.
pub fn positive_f1(
    pred: &CellTable<FactorSet>,
    truth: &CellTable<FactorSet>,
) -> Result<PositiveF1, MetricsError> {
    if pred.n_rows() != truth.n_rows() || pred.n_cols() != truth.n_cols() {
        return Err(MetricsError::ShapeMismatch);
    }
    positive_f1_cells(pred.cells().iter().zip(truth.cells()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// Rows are ground truth, columns are predictions.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn empty(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.labels, other.labels, "confusion alphabets differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    pub fn record(&mut self, truth: usize, pred: usize) {
        self.counts[truth][pred] += 1;
    }
}

pub fn confusion<L: PartialEq + fmt::Display>(
    pred: &[L],
    truth: &[L],
    alphabet: &[L],
) -> Result<ConfusionMatrix, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    let index = |l: &L| {
        alphabet
            .iter()
            .position(|a| a == l)
            .ok_or_else(|| MetricsError::LabelOutsideAlphabet(l.to_string()))
    };
    let mut m = ConfusionMatrix::empty(alphabet.iter().map(|l| l.to_string()).collect());
    for (p, t) in pred.iter().zip(truth) {
        m.record(index(t)?, index(p)?);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdKind {
    #[default]
    Sample,
    Population,
}

impl fmt::Display for StdKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StdKind::Sample => "sample",
            StdKind::Population => "population",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and standard deviation; a single sample has std 0 either way.
pub fn summarize(scores: &[f64], kind: StdKind) -> Result<ScoreSummary, MetricsError> {
    let n = scores.len();
    if n == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mean = scores.iter().sum::<f64>() / n as f64;
    let ss: f64 = scores.iter().map(|s| (s - mean).powi(2)).sum();
    let denom = match kind {
        StdKind::Sample if n > 1 => (n - 1) as f64,
        StdKind::Sample => 1.0,
        StdKind::Population => n as f64,
    };
    Ok(ScoreSummary {
        mean,
        std: (ss / denom).sqrt(),
        n,
    })
}

/// The scored output kinds, in report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OutputKind {
    Participants,
    Restaurants,
    Chosen,
    Step11,
    Suggestion,
    Response,
    Step12,
    Mentioned,
    Perception,
    Interpretation,
}

impl OutputKind {
    pub const ALL: [OutputKind; 10] = [
        OutputKind::Participants,
        OutputKind::Restaurants,
        OutputKind::Chosen,
        OutputKind::Step11,
        OutputKind::Suggestion,
        OutputKind::Response,
        OutputKind::Step12,
        OutputKind::Mentioned,
        OutputKind::Perception,
        OutputKind::Interpretation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Participants => "Participants",
            OutputKind::Restaurants => "Restaurants",
            OutputKind::Chosen => "Chosen",
            OutputKind::Step11 => "Step1.1",
            OutputKind::Suggestion => "Suggestion",
            OutputKind::Response => "Response",
            OutputKind::Step12 => "Step1.2",
            OutputKind::Mentioned => "MentionedTable",
            OutputKind::Perception => "PerceptionTable",
            OutputKind::Interpretation => "InterpretationTable",
        }
    }

    pub fn step(self) -> crate::prompts::StepId {
        use crate::prompts::StepId;
        match self {
            OutputKind::Mentioned => StepId::Step2,
            OutputKind::Perception => StepId::Step3,
            OutputKind::Interpretation => StepId::Step4,
            _ => StepId::Step1,
        }
    }
}

impl fmt::Display for OutputKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableScoring {
    #[default]
    Aligned,
    Raw,
}

impl fmt::Display for TableScoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TableScoring::Aligned => "aligned",
            TableScoring::Raw => "raw",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepScores {
    pub step11: f64,
    pub step12: f64,
    pub step2: f64,
    pub step3: f64,
    /// Absent when the ground truth has no non-empty factor cell.
    pub step4_positive_f1: Option<f64>,
    pub spurious_factors: usize,
    pub components: BTreeMap<String, PRF>,
}

impl StepScores {
    pub fn get(&self, kind: OutputKind) -> Option<f64> {
        let c = |k: &str| self.components.get(k).map(|p| p.f1);
        match kind {
            OutputKind::Participants => c("participants"),
            OutputKind::Restaurants => c("restaurants"),
            OutputKind::Chosen => c("chosen"),
            OutputKind::Step11 => Some(self.step11),
            OutputKind::Suggestion => c("suggestions"),
            OutputKind::Response => c("responses"),
            OutputKind::Step12 => Some(self.step12),
            OutputKind::Mentioned => Some(self.step2),
            OutputKind::Perception => Some(self.step3),
            OutputKind::Interpretation => self.step4_positive_f1,
        }
    }
}

/// Table score for step 2 or 3 under the chosen scoring path.
pub fn table_f1<L: CellValue>(
    pred: &CellTable<L>,
    truth: &CellTable<L>,
    resolver: Option<&NameResolver>,
    mode: TableScoring,
) -> PRF {
    match mode {
        TableScoring::Aligned => score_table(pred, truth, resolver).0,
        TableScoring::Raw => score_table_raw(pred, truth, resolver),
    }
}

/// Interpretation-table Positive-F1 after aligning onto the truth grid.
pub fn step4_score(
    pred: &CellTable<FactorSet>,
    truth: &CellTable<FactorSet>,
    resolver: Option<&NameResolver>,
) -> Result<PositiveF1, MetricsError> {
    let (aligned, _) = align(pred, truth, resolver);
    positive_f1(&aligned, truth)
}

/// Every step score of one predicted group against its annotation.
pub fn score_group(
    pred: &GroupAnnotation,
    truth: &GroupAnnotation,
    resolver: Option<&NameResolver>,
    mode: TableScoring,
) -> StepScores {
    let s11 = score_step11(&pred.step1, &truth.step1, resolver);
    let s12 = score_step12(&pred.step12, &truth.step12);
    let m = table_f1(&pred.mentioned, &truth.mentioned, resolver, mode);
    let p = table_f1(&pred.perception, &truth.perception, resolver, mode);
    let s4 = step4_score(&pred.interpretation, &truth.interpretation, resolver).ok();
    let mut components = BTreeMap::new();
    components.insert("participants".to_string(), s11.participants);
    components.insert("restaurants".to_string(), s11.restaurants);
    components.insert("chosen".to_string(), s11.chosen);
    components.insert("suggestions".to_string(), s12.suggestions);
    components.insert("responses".to_string(), s12.responses);
    components.insert("mentioned".to_string(), m);
    components.insert("perception".to_string(), p);
    StepScores {
        step11: s11.score,
        step12: s12.score,
        step2: m.f1,
        step3: p.f1,
        step4_positive_f1: s4.map(|s| s.score),
        spurious_factors: s4.map(|s| s.spurious).unwrap_or(0),
        components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        Factor, LabelEntry, MentionLabel, PerceptionLabel, ResponseLabel, SuggestionLabel,
    };
    use proptest::prelude::*;

    const EPS: f64 = 1e-12;

    /// Counts by linear scans over deduplicated vectors.
    fn oracle_f1(pred: &[u8], truth: &[u8]) -> f64 {
        let mut p: Vec<u8> = Vec::new();
        for x in pred {
            if !p.contains(x) {
                p.push(*x);
            }
        }
        let mut t: Vec<u8> = Vec::new();
        for x in truth {
            if !t.contains(x) {
                t.push(*x);
            }
        }
        let mut hits = 0;
        for x in &p {
            for y in &t {
                if x == y {
                    hits += 1;
                }
            }
        }
        if hits == 0 {
            return 0.0;
        }
        let prec = hits as f64 / p.len() as f64;
        let rec = hits as f64 / t.len() as f64;
        2.0 * prec * rec / (prec + rec)
    }

    fn fs(codes: &[Factor]) -> FactorSet {
        codes.iter().copied().collect()
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn set_f1_examples() {
        assert_eq!(set_f1(["A", "B"], ["A", "B"]).f1, 1.0);
        assert_eq!(set_f1(Vec::<&str>::new(), ["A"]).f1, 0.0);
        let r = set_f1(["a", "b", "c"], ["a", "b", "d"]);
        assert!((r.precision - 2.0 / 3.0).abs() < EPS);
        assert!((r.recall - 2.0 / 3.0).abs() < EPS);
        assert!((r.f1 - 2.0 / 3.0).abs() < EPS);
        let e = set_f1(Vec::<u8>::new(), Vec::<u8>::new());
        assert!(e.both_empty);
        assert_eq!(e.f1, 0.0);
    }

    fn s1(parts: &[&str], rest: &[&str], chosen: Chosen) -> Step1Result {
        Step1Result {
            participants: names(parts),
            restaurants: names(rest),
            chosen,
        }
    }

    #[test]
    fn step11_examples() {
        let t = s1(&["A", "B"], &["X", "Y"], Chosen::Restaurant("X".into()));
        assert_eq!(score_step11(&t, &t, None).score, 1.0);
        let ns = s1(&["a ", "B"], &["x", "Y"], Chosen::NotSpecified);
        let sc = score_step11(&ns, &t, None);
        assert!((sc.score - 2.0 / 3.0).abs() < EPS);
        // Arithmetic of the composite on given component values.
        assert!(((1.0 + 1.0 + 0.95) / 3.0_f64 - 0.98333).abs() < 1e-4);
    }

    fn ego(sugg: &[SuggestionLabel], resp: &[ResponseLabel]) -> EgocentrismResult {
        let who = ["P0", "P1", "P2", "P3"];
        EgocentrismResult {
            suggestions: sugg
                .iter()
                .enumerate()
                .map(|(i, l)| LabelEntry::new(who[i], *l))
                .collect(),
            responses: resp
                .iter()
                .enumerate()
                .map(|(i, l)| LabelEntry::new(who[i], *l))
                .collect(),
        }
    }

    #[test]
    fn step12_examples() {
        use ResponseLabel as R;
        use SuggestionLabel as S;
        let truth = ego(
            &[S::Strong, S::Weak, S::Moderate, S::Weak],
            &[R::Agreeable, R::Moderate, R::Disagreeable, R::Agreeable],
        );
        assert_eq!(score_step12(&truth, &truth).score, 1.0);
        let pred = ego(
            &[S::Strong, S::Weak, S::Moderate, S::Weak],
            &[R::Agreeable, R::Moderate, R::Disagreeable, R::Moderate],
        );
        let s = score_step12(&pred, &truth);
        assert!((s.responses.f1 - 0.75).abs() < EPS);
        assert!((s.score - 0.875).abs() < EPS);
        let agree = [R::Agreeable; 3];
        let all_weak = ego(&[S::Weak; 3], &agree);
        let all_strong = ego(&[S::Strong; 3], &agree);
        assert_eq!(score_step12(&all_weak, &all_strong).suggestions.f1, 0.0);
    }

    #[test]
    fn table_examples() {
        use MentionLabel::*;
        let truth = CellTable::new(
            names(&["A", "B"]),
            names(&["X", "Y"]),
            vec![Mentioned, NotMentioned, NotMentioned, Mentioned],
        )
        .unwrap();
        assert_eq!(score_table(&truth, &truth, None).0.f1, 1.0);
        let three = CellTable::new(
            names(&["A", "B"]),
            names(&["X", "Y"]),
            vec![Mentioned, NotMentioned, NotMentioned, NotMentioned],
        )
        .unwrap();
        assert!((score_table(&three, &truth, None).0.f1 - 0.75).abs() < EPS);

        let wide = CellTable::new(
            names(&["A", "B"]),
            names(&["X", "Y", "Z"]),
            vec![
                Mentioned,
                NotMentioned,
                NotMentioned,
                NotMentioned,
                Mentioned,
                Mentioned,
            ],
        )
        .unwrap();
        let raw = score_table_raw(&wide, &truth, None);
        assert!((raw.precision - 4.0 / 6.0).abs() < EPS);
        assert!((raw.recall - 1.0).abs() < EPS);
        assert!((raw.f1 - 0.8).abs() < EPS);
        let (aligned, report) = score_table(&wide, &truth, None);
        assert_eq!(aligned.f1, 1.0);
        assert_eq!(report.extra_cols, names(&["Z"]));
    }

    #[test]
    fn alignment_examples() {
        use PerceptionLabel::*;
        let truth = CellTable::new(
            names(&["A"]),
            names(&["McDonald's", "Hanuri"]),
            vec![Positive, Negative],
        )
        .unwrap();
        let (same, rep) = align(&truth, &truth, None);
        assert_eq!(same, truth);
        assert!(rep.is_empty());

        let missing =
            CellTable::new(names(&["A"]), names(&["McDonald's"]), vec![Positive]).unwrap();
        let (a, rep) = align(&missing, &truth, None);
        assert_eq!(rep.missing_entities(), 1);
        assert_eq!(*a.get(0, 1), Neutral);

        let mut res = NameResolver::new();
        res.add_restaurant("McDonald's");
        res.add_restaurant("Hanuri");
        res.add_alias("Mac", "McDonald's");
        let aliased = CellTable::new(
            names(&["A"]),
            names(&["Mac", "Hanuri"]),
            vec![Positive, Negative],
        )
        .unwrap();
        let (a, rep) = align(&aliased, &truth, Some(&res));
        assert_eq!(a, truth);
        assert_eq!(
            rep.renamed_cols,
            vec![("Mac".to_string(), "McDonald's".to_string())]
        );
        assert!(rep.extra_cols.is_empty());
    }

    #[test]
    fn positive_f1_examples() {
        let (a1, a2, a3) = (fs(&[Factor::A1]), fs(&[Factor::A2]), fs(&[Factor::A3]));
        let empty = FactorSet::EMPTY;
        let r = positive_f1_cells([(&a1, &a1), (&a2, &empty)]).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!((r.cells, r.spurious), (1, 1));

        let a12 = fs(&[Factor::A1, Factor::A2]);
        let r = positive_f1_cells([(&a12, &a1), (&empty, &a3)]).unwrap();
        assert!((r.score - 1.0 / 3.0).abs() < EPS);

        assert_eq!(
            positive_f1_cells([(&a1, &empty), (&empty, &empty)]),
            Err(MetricsError::EmptyPositiveSet)
        );
    }

    #[test]
    fn confusion_examples() {
        use ResponseLabel::*;
        let m = confusion(
            &[Agreeable, Moderate],
            &[Agreeable, Moderate],
            &ResponseLabel::ALL,
        )
        .unwrap();
        assert_eq!(m.counts, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 0]]);
        let m = confusion(
            &[Agreeable, Agreeable],
            &[Moderate, Moderate],
            &ResponseLabel::ALL,
        )
        .unwrap();
        assert_eq!(m.counts[1][0], 2);
        assert_eq!(m.total(), 2);
        assert_eq!(
            confusion(&[Agreeable], &[], &ResponseLabel::ALL),
            Err(MetricsError::LengthMismatch { pred: 1, truth: 0 })
        );
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[1.0, 1.0, 1.0], StdKind::Sample).unwrap();
        assert_eq!((s.mean, s.std, s.n), (1.0, 0.0, 3));
        let s = summarize(&[0.8, 1.0], StdKind::Sample).unwrap();
        assert!((s.mean - 0.9).abs() < EPS);
        assert!((s.std - 0.02_f64.sqrt()).abs() < 1e-12);
        assert!((s.std - 0.1414).abs() < 1e-4);
        let p = summarize(&[0.8, 1.0], StdKind::Population).unwrap();
        assert!((p.std - 0.1).abs() < 1e-12);
        assert_eq!(
            summarize(&[], StdKind::Sample),
            Err(MetricsError::EmptyInput)
        );
    }

    fn factor_set() -> impl Strategy<Value = FactorSet> {
        (0u8..128).prop_map(|bits| {
            Factor::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, f)| *f)
                .collect()
        })
    }

    fn table_pair(
    ) -> impl Strategy<Value = (CellTable<PerceptionLabel>, CellTable<PerceptionLabel>)> {
        (1usize..5, 1usize..5).prop_flat_map(|(n, m)| {
            let cell = prop::sample::select(PerceptionLabel::ALL.to_vec());
            (
                prop::collection::vec(cell.clone(), n * m),
                prop::collection::vec(cell, n * m),
            )
                .prop_map(move |(a, b)| {
                    let rows: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
                    let cols: Vec<String> = (0..m).map(|j| format!("r{j}")).collect();
                    (
                        CellTable::new(rows.clone(), cols.clone(), a).unwrap(),
                        CellTable::new(rows, cols, b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn set_f1_matches_oracle(a in prop::collection::vec(0u8..12, 0..=8), b in prop::collection::vec(0u8..12, 0..=8)) {
            let got = set_f1(a.iter().copied(), b.iter().copied()).f1;
            prop_assert!((got - oracle_f1(&a, &b)).abs() < EPS);
        }

        #[test]
        fn set_f1_symmetric_and_bounded(a in prop::collection::vec(0u8..12, 0..=8), b in prop::collection::vec(0u8..12, 0..=8)) {
            let ab = set_f1(a.iter().copied(), b.iter().copied());
            let ba = set_f1(b.iter().copied(), a.iter().copied());
            prop_assert!((ab.f1 - ba.f1).abs() < EPS);
            prop_assert!((0.0..=1.0).contains(&ab.f1));
            if ab.precision + ab.recall > 0.0 {
                prop_assert!(ab.precision.min(ab.recall) <= ab.f1 + EPS);
                prop_assert!(ab.f1 <= ab.precision.max(ab.recall) + EPS);
            }
        }

        #[test]
        fn removing_a_hit_never_helps(a in prop::collection::vec(0u8..12, 1..=8), b in prop::collection::vec(0u8..12, 0..=8)) {
            let before = set_f1(a.iter().copied(), b.iter().copied()).f1;
            if let Some(hit) = a.iter().find(|x| b.contains(x)).copied() {
                let damaged: Vec<u8> = a.iter().copied().filter(|x| *x != hit).collect();
                let after = set_f1(damaged, b.iter().copied()).f1;
                prop_assert!(after <= before + EPS);
            }
        }

        #[test]
        fn positive_f1_ignores_empty_truth_cells(
            base in prop::collection::vec((factor_set(), factor_set()), 1..8),
            extra in prop::collection::vec(factor_set(), 0..8),
        ) {
            let empty = FactorSet::EMPTY;
            let before = positive_f1_cells(base.iter().map(|(p, t)| (p, t)));
            let after = positive_f1_cells(base.iter().map(|(p, t)| (p, t)).chain(extra.iter().map(|p| (p, &empty))));
            match (before, after) {
                (Ok(b), Ok(a)) => prop_assert!((b.score - a.score).abs() < EPS),
                (Err(e1), Err(e2)) => prop_assert_eq!(e1, e2),
                _ => prop_assert!(false, "membership changed"),
            }
        }

        #[test]
        fn aligned_table_f1_is_cell_agreement((pred, truth) in table_pair()) {
            let (prf, _) = score_table(&pred, &truth, None);
            let agree = pred.cells().iter().zip(truth.cells()).filter(|(a, b)| a == b).count();
            let rate = agree as f64 / truth.cells().len() as f64;
            prop_assert!((prf.f1 - rate).abs() < EPS);
        }

        #[test]
        fn confusion_rows_match_truth_histogram(pairs in prop::collection::vec((0usize..4, 0usize..4), 0..40)) {
            let pred: Vec<PerceptionLabel> = pairs.iter().map(|(p, _)| PerceptionLabel::ALL[*p]).collect();
            let truth: Vec<PerceptionLabel> = pairs.iter().map(|(_, t)| PerceptionLabel::ALL[*t]).collect();
            let m = confusion(&pred, &truth, &PerceptionLabel::ALL).unwrap();
            let hist: Vec<u64> = PerceptionLabel::ALL.iter().map(|l| truth.iter().filter(|t| *t == l).count() as u64).collect();
            prop_assert_eq!(m.row_sums(), hist);
        }
    }
}
