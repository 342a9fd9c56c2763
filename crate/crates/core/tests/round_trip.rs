use std::sync::Arc;

use chatdecide::backend::{Client, ClientConfig, Fallback, ScriptedBackend};
use chatdecide::exec::Execution;
use chatdecide::metrics::{OutputKind, StdKind};
use chatdecide::model::{load_corpus, save_corpus, Corpus};
use chatdecide::pipeline::{load_bundles, save_bundles, GroupInput, Pipeline, RunConfig};
use chatdecide::report::{self, GridColumn, ReportOptions};
use chatdecide::store::RunStore;
use chatdecide::synth::{generate_corpus, truth_script, ScenarioParams};

fn small_config(runs: u32, execution: Execution) -> RunConfig {
    RunConfig {
        runs_per_technique: runs,
        execution,
        ..RunConfig::default()
    }
}

fn truth_client(corpus: &Corpus, cfg: &RunConfig) -> (Client, Arc<ScriptedBackend>) {
    let script = truth_script(corpus, &cfg.techniques, cfg.runs_per_technique);
    let backend = Arc::new(ScriptedBackend::new(script, Fallback::Error));
    let client = Client::new(Box::new(backend.clone()), ClientConfig::default()).unwrap();
    (client, backend)
}

#[test]
fn perfect_extraction_scores_one_everywhere() {
    let corpus = generate_corpus(5, 12, &ScenarioParams::default()).unwrap();
    let cfg = small_config(2, Execution::default());
    let (client, _) = truth_client(&corpus, &cfg);
    let pipeline = Pipeline::new(cfg, &client, None).unwrap();
    let run = pipeline.run_corpus(&GroupInput::from_corpus(&corpus));
    assert!(run.failures.is_empty(), "{:?}", run.failures);
    assert_eq!(run.bundles.len(), 12);
    for b in &run.bundles {
        let mut truth = corpus.get(&b.group_id).unwrap().annotation.clone().unwrap();
        truth.mention_style = None;
        assert_eq!(b.prediction, truth, "{}", b.group_id);
    }
    let r = report::build_report(&run.bundles, &corpus, &ReportOptions::default()).unwrap();
    assert!(r.rows.iter().all(|row| row.score == 1.0));
    for g in &r.grids {
        for row in &g.rows {
            for (col, s) in &row.cells {
                assert_eq!((s.mean, s.std), (1.0, 0.0), "{} {:?}", row.output, col);
            }
        }
    }
    let step1 = &r.grids[0];
    assert!(step1.rows.iter().any(|r| r.output == OutputKind::Chosen));
    assert_eq!(step1.rows[0].cells[&GridColumn::Ave].n, 12);
    let c = r.confusions.as_ref().unwrap();
    for (_, m) in c.iter() {
        for (i, row) in m.counts.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                assert!(i == j || *x == 0);
            }
        }
    }
    assert_eq!(r.spurious_factor_count, Some(0));
    assert!(r.strata.is_some());
}

#[test]
fn sequential_and_parallel_agree() {
    let corpus = generate_corpus(8, 6, &ScenarioParams::default()).unwrap();
    let mut outs = Vec::new();
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = small_config(2, exec);
        let (client, _) = truth_client(&corpus, &cfg);
        let run = Pipeline::new(cfg, &client, None)
            .unwrap()
            .run_corpus(&GroupInput::from_corpus(&corpus));
        let r = report::build_report(&run.bundles, &corpus, &ReportOptions::default()).unwrap();
        outs.push((
            serde_json::to_string(&run.bundles).unwrap(),
            report::scores_csv(&r.rows),
        ));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn resume_over_complete_store_sends_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(2, 3, &ScenarioParams::default()).unwrap();
    let cfg = small_config(1, Execution::default());
    let inputs = GroupInput::from_corpus(&corpus);

    let (client, first) = truth_client(&corpus, &cfg);
    let store = RunStore::open(dir.path().join("runs")).unwrap();
    let a = Pipeline::new(cfg.clone(), &client, Some(store))
        .unwrap()
        .run_corpus(&inputs);
    assert!(first.calls() > 0);

    let (client, second) = truth_client(&corpus, &cfg);
    let store = RunStore::open(dir.path().join("runs")).unwrap();
    let b = Pipeline::new(cfg, &client, Some(store))
        .unwrap()
        .run_corpus(&inputs);
    assert_eq!(second.calls(), 0);
    assert_eq!(a.bundles, b.bundles);
}

#[test]
fn corpus_and_bundles_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_corpus(9, 4, &ScenarioParams::default()).unwrap();
    save_corpus(&dir.path().join("corpus"), &corpus).unwrap();
    let loaded = load_corpus(&dir.path().join("corpus")).unwrap();
    assert_eq!(loaded, corpus);

    let cfg = small_config(1, Execution::default());
    let (client, _) = truth_client(&corpus, &cfg);
    let run = Pipeline::new(cfg, &client, None)
        .unwrap()
        .run_corpus(&GroupInput::from_corpus(&corpus));
    save_bundles(&dir.path().join("bundles"), &run.bundles).unwrap();
    let back = load_bundles(&dir.path().join("bundles")).unwrap();
    assert_eq!(back, run.bundles);

    // The grids fold back out of the persisted score file unchanged.
    let r = report::build_report(&back, &loaded, &ReportOptions::default()).unwrap();
    let out = dir.path().join("report");
    report::export(&r, &out).unwrap();
    let rows = report::read_scores(&out.join(report::SCORES_FILE)).unwrap();
    let refolded = report::report_from_rows(rows, StdKind::Sample).unwrap();
    assert_eq!(refolded.grids, r.grids);
    assert_eq!(refolded.strata, r.strata);
}

#[test]
fn unpaired_bundles_are_an_error() {
    let corpus = generate_corpus(1, 2, &ScenarioParams::default()).unwrap();
    let other = generate_corpus(1, 2, &ScenarioParams::default()).unwrap();
    let cfg = small_config(1, Execution::default());
    let (client, _) = truth_client(&corpus, &cfg);
    let mut run = Pipeline::new(cfg, &client, None)
        .unwrap()
        .run_corpus(&GroupInput::from_corpus(&corpus));
    for b in &mut run.bundles {
        b.group_id = format!("x{}", b.group_id);
    }
    assert!(matches!(
        report::build_report(&run.bundles, &other, &ReportOptions::default()),
        Err(report::ReportError::NoPairs)
    ));
}
