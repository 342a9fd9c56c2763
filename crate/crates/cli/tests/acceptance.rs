//! Acceptance gate: one PASS/FAIL line per criterion, then a single verdict.
//!
//! Run with `cargo test -p chatdecide-cli --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use chatdecide::backend::{Client, ClientConfig, Fallback, Script, ScriptKey, ScriptedBackend};
use chatdecide::metrics::{self, OutputKind};
use chatdecide::model::{
    CellTable, Chosen, EgocentrismResult, Factor, FactorSet, LabelEntry, PerceptionLabel,
    ResponseLabel, Step1Result, SuggestionLabel,
};
use chatdecide::parser::{self, ParseStatus};
use chatdecide::pipeline::{
    select_best, select_truth_free, Candidate, GroupInput, Pipeline, RunConfig,
};
use chatdecide::prompts::{PromptTechnique, StepId};
use chatdecide::report::{self, ReportOptions};
use chatdecide::synth::{generate_corpus, generate_group, truth_script, Count, ScenarioParams};

const TOL: f64 = 1e-12;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------------------
// brute-force oracles

/// F1 by explicit counting over duplicate-free lists.
fn oracle_f1<T: PartialEq>(pred: &[T], truth: &[T]) -> f64 {
    let hits = pred
        .iter()
        .filter(|p| truth.iter().any(|t| t == *p))
        .count();
    if pred.len() + truth.len() == 0 || hits == 0 {
        return 0.0;
    }
    2.0 * hits as f64 / (pred.len() + truth.len()) as f64
}

fn distinct_subset<R: Rng>(rng: &mut R, alphabet: usize, max: usize) -> Vec<usize> {
    let k = rng.random_range(0..=max);
    let mut out: Vec<usize> = Vec::with_capacity(k);
    while out.len() < k {
        let x = rng.random_range(0..alphabet);
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

fn response_map<R: Rng>(rng: &mut R) -> EgocentrismResult {
    let who = distinct_subset(rng, 12, 8);
    EgocentrismResult {
        suggestions: Vec::new(),
        responses: who
            .into_iter()
            .map(|i| LabelEntry::new(format!("p{i}"), ResponseLabel::ALL[rng.random_range(0..3)]))
            .collect(),
    }
}

fn random_table<R: Rng>(rng: &mut R) -> CellTable<PerceptionLabel> {
    let mut rows = distinct_subset(rng, 12, 2);
    if rows.is_empty() {
        rows.push(rng.random_range(0..12));
    }
    let mut cols = distinct_subset(rng, 12, 4);
    if cols.is_empty() {
        cols.push(rng.random_range(0..12));
    }
    let cells = (0..rows.len() * cols.len())
        .map(|_| PerceptionLabel::ALL[rng.random_range(0..4)])
        .collect();
    CellTable::new(
        rows.iter().map(|i| format!("p{i}")).collect(),
        cols.iter().map(|j| format!("r{j}")).collect(),
        cells,
    )
    .unwrap()
}

fn table_triplets(t: &CellTable<PerceptionLabel>) -> Vec<(String, String, PerceptionLabel)> {
    let mut v = Vec::new();
    for (i, r) in t.rows().iter().enumerate() {
        for (j, c) in t.cols().iter().enumerate() {
            v.push((r.clone(), c.clone(), *t.get(i, j)));
        }
    }
    v
}

// ---------------------------------------------------------------------------
// criteria

fn c1_metric_oracles() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for i in 0..1000 {
        let p = distinct_subset(&mut rng, 12, 8);
        let t = distinct_subset(&mut rng, 12, 8);
        let got = metrics::set_f1(p.iter().copied(), t.iter().copied()).f1;
        ensure(close(got, oracle_f1(&p, &t), TOL), || {
            format!("set F1 instance {i}: {got}")
        })?;

        let (pm, tm) = (response_map(&mut rng), response_map(&mut rng));
        let got = metrics::score_step12(&pm, &tm).responses.f1;
        let pairs = |m: &EgocentrismResult| -> Vec<(String, ResponseLabel)> {
            m.responses
                .iter()
                .map(|e| (e.participant.clone(), e.label))
                .collect()
        };
        let want = oracle_f1(&pairs(&pm), &pairs(&tm));
        ensure(close(got, want, TOL), || {
            format!("pair F1 instance {i}: {got} vs {want}")
        })?;

        let (pt, tt) = (random_table(&mut rng), random_table(&mut rng));
        let got = metrics::score_table_raw(&pt, &tt, None).f1;
        let want = oracle_f1(&table_triplets(&pt), &table_triplets(&tt));
        ensure(close(got, want, TOL), || {
            format!("triplet F1 instance {i}: {got} vs {want}")
        })?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok(format!("3 x 1000 instances agree within 1e-12 in {took:?}"))
}

fn fs_of(v: &[Factor]) -> FactorSet {
    v.iter().copied().collect()
}

fn c2_positive_f1() -> Verdict {
    let start = Instant::now();
    use Factor::*;
    let a = [(fs_of(&[A1]), fs_of(&[A1])), (fs_of(&[A2]), fs_of(&[]))];
    let s = metrics::positive_f1_cells(a.iter().map(|(p, t)| (p, t))).map_err(|e| e.to_string())?;
    ensure(s.score == 1.0 && s.cells == 1 && s.spurious == 1, || {
        format!("first example gave {s:?}")
    })?;
    let b = [(fs_of(&[A1, A2]), fs_of(&[A1])), (fs_of(&[]), fs_of(&[A3]))];
    let s = metrics::positive_f1_cells(b.iter().map(|(p, t)| (p, t))).map_err(|e| e.to_string())?;
    ensure(close(s.score, 1.0 / 3.0, TOL), || {
        format!("second example gave {}", s.score)
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    for i in 0..200 {
        let n = rng.random_range(1..10);
        let mut cells: Vec<(FactorSet, FactorSet)> = (0..n)
            .map(|_| {
                (
                    FactorSet::from_bits(rng.random()),
                    FactorSet::from_bits(rng.random()),
                )
            })
            .collect();
        cells[0].1 = FactorSet::from_bits(rng.random_range(1..128));
        let base = metrics::positive_f1_cells(cells.iter().map(|(p, t)| (p, t))).unwrap();
        let extra = rng.random_range(1..8);
        for _ in 0..extra {
            cells.push((FactorSet::from_bits(rng.random()), FactorSet::EMPTY));
        }
        let again = metrics::positive_f1_cells(cells.iter().map(|(p, t)| (p, t))).unwrap();
        ensure(
            again.score == base.score && again.cells == base.cells,
            || format!("instance {i}: {} became {}", base.score, again.score),
        )?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(1), || format!("took {took:?}"))?;
    Ok(format!(
        "examples give 1.0 and 0.3333; skip invariance holds on 200 instances in {took:?}"
    ))
}

fn c3_composite() -> Verdict {
    let x = metrics::step11_composite(1.00, 1.00, 0.95);
    ensure(close(x, 2.95 / 3.0, 1e-9), || format!("composite {x}"))?;
    ensure(format!("{x:.4}") == "0.9833", || {
        format!("composite {x} does not round to 0.9833")
    })?;
    Ok(format!("Step 1.1 composite of (1.00, 1.00, 0.95) = {x:.6}"))
}

fn c4_perfect_round_trip() -> Verdict {
    let start = Instant::now();
    let corpus = generate_corpus(47, 47, &ScenarioParams::default()).map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let script = truth_script(&corpus, &cfg.techniques, cfg.runs_per_technique);
    let backend = Arc::new(ScriptedBackend::new(script, Fallback::Error));
    let client =
        Client::new(Box::new(backend), ClientConfig::default()).map_err(|e| e.to_string())?;
    let run = Pipeline::new(cfg, &client, None)
        .map_err(|e| e.to_string())?
        .run_corpus(&GroupInput::from_corpus(&corpus));
    ensure(run.failures.is_empty(), || {
        format!("{} groups failed", run.failures.len())
    })?;
    let rep = report::build_report(&run.bundles, &corpus, &ReportOptions::default())
        .map_err(|e| e.to_string())?;
    let mut seen: BTreeMap<(String, OutputKind), usize> = BTreeMap::new();
    for r in &rep.rows {
        ensure(r.score == 1.0, || {
            format!(
                "{} {} {} run {} scored {}",
                r.group_id, r.output, r.technique, r.run, r.score
            )
        })?;
        *seen.entry((r.group_id.clone(), r.output)).or_default() += 1;
    }
    ensure(seen.len() == 47 * OutputKind::ALL.len(), || {
        format!("{} group/output pairs scored", seen.len())
    })?;
    for g in &rep.grids {
        for row in &g.rows {
            for (col, s) in &row.cells {
                ensure(s.mean == 1.0 && s.std == 0.0 && s.n == 47, || {
                    format!("grid {} {} {}: {:?}", g.name, row.output, col.label(), s)
                })?;
            }
        }
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!(
        "47 groups, {} score rows all 1.00, grids all-ones in {took:?}",
        rep.rows.len()
    ))
}

fn c5_controlled_degradation() -> Verdict {
    let params = ScenarioParams {
        n_members: Count::Exact(4),
        ..ScenarioParams::default()
    };
    let (_, truth) = generate_group(5, &params).map_err(|e| e.to_string())?;
    let mut pred = truth.step12.clone();
    let old = pred.responses[2].label;
    pred.responses[2].label = ResponseLabel::ALL
        .iter()
        .copied()
        .find(|l| *l != old)
        .unwrap();
    let s = metrics::score_step12(&pred, &truth.step12);
    ensure(close(s.responses.f1, 0.75, TOL), || {
        format!("Response pair-F1 {}", s.responses.f1)
    })?;
    ensure(close(s.score, 0.875, TOL), || {
        format!("Step 1.2 score {}", s.score)
    })?;

    for m in 2..=6usize {
        let names: Vec<String> = (0..m).map(|i| format!("Restaurant {i}")).collect();
        let truth = Step1Result {
            participants: vec!["Aoi".into(), "Ren".into()],
            restaurants: names.clone(),
            chosen: Chosen::Restaurant(names[0].clone()),
        };
        let pred = Step1Result {
            restaurants: names[..m - 1].to_vec(),
            ..truth.clone()
        };
        let got = metrics::score_step11(&pred, &truth, None).restaurants.f1;
        let closed_form = 2.0 * (m as f64 - 1.0) / (2.0 * m as f64 - 1.0);
        let brute = oracle_f1(&pred.restaurants, &truth.restaurants);
        ensure(
            close(got, closed_form, TOL) && close(got, brute, TOL),
            || format!("m={m}: {got} vs {closed_form} vs {brute}"),
        )?;
    }
    Ok("flip gives 0.75 / 0.875; omission matches 2(m-1)/(2m-1) for m = 2..6".into())
}

fn c6_selection() -> Verdict {
    use PromptTechnique::*;
    let cand = |t, run, score, issues| Candidate {
        technique: t,
        run_index: run,
        parsed: true,
        issues,
        score: Some(score),
    };
    let mut c = Vec::new();
    for (t, mean) in [(Cot, 0.37), (Sr, 0.40), (Pd, 0.38), (More, 0.39)] {
        // five runs spread around the row value with that exact mean
        for (run, d) in [-0.02, 0.01, 0.0, 0.02, -0.01].iter().enumerate() {
            c.push(cand(t, run as u32, mean + d, 0));
        }
    }
    let (t, run) = select_best(&c).map_err(|e| e.to_string())?;
    ensure(t == Sr && run == 3, || format!("selected {t} run {run}"))?;

    let ties: Vec<Candidate> = [0.6, 0.8, 0.8, 0.8, 0.7]
        .iter()
        .enumerate()
        .map(|(i, s)| cand(Pd, i as u32, *s, 0))
        .collect();
    let (_, run) = select_best(&ties).map_err(|e| e.to_string())?;
    ensure(run == 1, || format!("tie resolved to run {run}"))?;

    let free = vec![
        cand(Cot, 0, 0.0, 3),
        cand(Sr, 2, 0.0, 1),
        cand(Pd, 4, 0.0, 0),
        cand(More, 1, 0.0, 2),
    ];
    let (t, run) = select_truth_free(&free).map_err(|e| e.to_string())?;
    ensure((t, run) == (Pd, 4), || {
        format!("truth-free selected {t} run {run}")
    })?;
    Ok(
        "SR wins on 0.37/0.40/0.38/0.39; ties take lowest run; truth-free takes fewest issues"
            .into(),
    )
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/malformed")
}

fn c7_parser_robustness() -> Verdict {
    let mut files: Vec<PathBuf> = fs::read_dir(fixture_dir())
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    ensure(files.len() >= 12, || {
        format!("only {} fixtures", files.len())
    })?;
    let rows: Vec<String> = ["Aoi", "Ren", "Yui"].map(String::from).to_vec();
    let cols: Vec<String> = ["Napoli Pizza", "Hanuri"].map(String::from).to_vec();
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    for f in &files {
        let raw = fs::read_to_string(f).map_err(|e| e.to_string())?;
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        let status = catch_unwind(AssertUnwindSafe(|| {
            if name.contains(".step1.") {
                parser::parse_step1(&raw).status
            } else if name.contains(".step2.") {
                parser::parse_mentioned(&raw, &rows, &cols, None).status
            } else if name.contains(".step3.") {
                parser::parse_perception(&raw, &rows, &cols, None).status
            } else {
                parser::parse_interpretation(&raw, &rows, &cols, None).status
            }
        }))
        .map_err(|_| format!("parser panicked on {name}"))?;
        ensure(
            matches!(
                status,
                ParseStatus::Ok | ParseStatus::Repaired | ParseStatus::Failed
            ),
            || format!("{name}: undocumented status"),
        )?;
        *tally.entry(format!("{status:?}")).or_default() += 1;
    }
    let raw = fs::read_to_string(fixture_dir().join("11_sr_draft_then_final.step4.txt"))
        .map_err(|e| e.to_string())?;
    let t = parser::parse_interpretation(&raw, &rows, &cols, None)
        .payload
        .ok_or("SR fixture did not parse")?;
    ensure(
        *t.get(1, 0) == fs_of(&[Factor::A2]) && *t.get(2, 1) == fs_of(&[Factor::A7]),
        || "SR fixture kept the draft table".into(),
    )?;
    Ok(format!(
        "{} fixtures, no panics, statuses {tally:?}; SR final table selected",
        files.len()
    ))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_chatdecide")
}

fn run_cli(workdir: &Path, args: &[&str]) -> Result<i32, String> {
    let out = Command::new(bin())
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    Ok(out.status.code().unwrap_or(-1))
}

/// A truth script with a few degraded entries, so outputs are not all-ones.
fn degraded_script(corpus_dir: &Path) -> Result<Script, String> {
    let corpus = chatdecide::model::load_corpus(corpus_dir).map_err(|e| e.to_string())?;
    let cfg = RunConfig::default();
    let mut script = truth_script(&corpus, &cfg.techniques, cfg.runs_per_technique);
    let first = &corpus.entries[0];
    let a = first.annotation.as_ref().unwrap();
    let g = first.transcript.group_id.clone();
    let mut s12 = a.step12.clone();
    s12.responses[0].label = ResponseLabel::ALL
        .iter()
        .copied()
        .find(|l| *l != s12.responses[0].label)
        .unwrap();
    s12.suggestions[0].label = SuggestionLabel::ALL
        .iter()
        .copied()
        .find(|l| *l != s12.suggestions[0].label)
        .unwrap();
    script.insert(
        ScriptKey::new(g.clone(), StepId::Step1, PromptTechnique::Zs, 1),
        parser::render_step1(&a.step1, &s12),
    );
    script.insert(
        ScriptKey::new(g.clone(), StepId::Step3, PromptTechnique::Pd, 2),
        "I cannot tell.",
    );
    let mut interp = a.interpretation.clone();
    interp.set(0, 0, fs_of(&[Factor::A5, Factor::A6]));
    script.insert(
        ScriptKey::new(g, StepId::Step4, PromptTechnique::More, 0),
        parser::render_table(parser::TableKind::Interpretation, &interp),
    );
    Ok(script)
}

fn one_execution(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let steps: [&[&str]; 1] = [&["synth", "--seed", "11", "--groups", "6", "--out", "corpus"]];
    for s in steps {
        ensure(run_cli(dir, s)? == 0, || format!("{s:?} failed"))?;
    }
    degraded_script(&dir.join("corpus"))?
        .save(&dir.join("script.jsonl"))
        .map_err(|e| e.to_string())?;
    let rest: [&[&str]; 3] = [
        &[
            "extract",
            "--corpus",
            "corpus",
            "--backend",
            "script",
            "--script",
            "script.jsonl",
            "--out",
            "ext",
        ],
        &[
            "evaluate",
            "--bundles",
            "ext",
            "--truth",
            "corpus",
            "--out",
            "eval",
        ],
        &["report", "--scores", "eval/scores.csv", "--out", "rep"],
    ];
    for s in rest {
        let code = run_cli(dir, s)?;
        ensure(code == 0, || format!("{s:?} exited {code}"))?;
    }
    let mut out = BTreeMap::new();
    for sub in ["eval", "rep"] {
        for e in fs::read_dir(dir.join(sub)).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                let key = format!("{sub}/{}", p.file_name().unwrap().to_string_lossy());
                out.insert(key, fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn c8_determinism() -> Verdict {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fa = one_execution(a.path())?;
    let fb = one_execution(b.path())?;
    ensure(fa.len() >= 8, || format!("only {} CSV files", fa.len()))?;
    ensure(fa.keys().eq(fb.keys()), || "different file sets".into())?;
    for (k, v) in &fa {
        ensure(fb[k] == *v, || format!("{k} differs between executions"))?;
    }
    let scores = String::from_utf8_lossy(&fa["eval/scores.csv"]).into_owned();
    ensure(scores.lines().skip(1).any(|l| !l.contains(",1,")), || {
        "degraded runs did not show up".into()
    })?;
    Ok(format!(
        "{} CSV files byte-identical across two executions",
        fa.len()
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, &str, fn() -> Verdict); 8] = [
        ("1", "metric oracle equivalence", c1_metric_oracles),
        ("2", "Positive-F1 correctness", c2_positive_f1),
        ("3", "composite-score arithmetic", c3_composite),
        ("4", "perfect-extraction round trip", c4_perfect_round_trip),
        ("5", "controlled degradation", c5_controlled_degradation),
        ("6", "selection protocol", c6_selection),
        ("7", "parser robustness", c7_parser_robustness),
        ("8", "determinism", c8_determinism),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let verdict = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match verdict {
            Ok(detail) => println!("criterion {id} PASS {name}: {detail}"),
            Err(detail) => {
                println!("criterion {id} FAIL {name}: {detail}");
                failed.push(id);
            }
        }
    }
    println!(
        "criterion 9 EXCLUDED explicit non-reproducibility: published scores need the original models and private \
         data; the live-backend smoke test is `live_backend_smoke` (ignored, set CHATDECIDE_LIVE_URL)"
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// One synthetic group, one technique per step, one run against a live endpoint.
#[test]
#[ignore]
fn live_backend_smoke() {
    let Ok(url) = std::env::var("CHATDECIDE_LIVE_URL") else {
        eprintln!("CHATDECIDE_LIVE_URL not set; skipping");
        return;
    };
    let model = std::env::var("CHATDECIDE_LIVE_MODEL").unwrap_or_else(|_| "gpt-4o".into());
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("live.toml"),
        "[extract]\nruns_per_technique = 1\n[extract.techniques]\nStep1 = [\"CoT\"]\nStep2 = [\"CoT\"]\nStep3 = [\"CoT\"]\nStep4 = [\"CoT\"]\n",
    )
    .unwrap();
    assert_eq!(
        run_cli(
            dir.path(),
            &["synth", "--seed", "1", "--groups", "1", "--out", "corpus"]
        )
        .unwrap(),
        0
    );
    let code = run_cli(
        dir.path(),
        &[
            "--config",
            "live.toml",
            "extract",
            "--corpus",
            "corpus",
            "--backend",
            "remote",
            "--base-url",
            &url,
            "--model",
            &model,
            "--max-requests",
            "16",
            "--max-tokens",
            "200000",
            "--out",
            "ext",
        ],
    )
    .unwrap();
    assert!(code == 0 || code == 1, "extract exited {code}");
    assert_eq!(
        run_cli(
            dir.path(),
            &[
                "evaluate",
                "--bundles",
                "ext",
                "--truth",
                "corpus",
                "--out",
                "eval"
            ]
        )
        .unwrap(),
        0
    );
}
