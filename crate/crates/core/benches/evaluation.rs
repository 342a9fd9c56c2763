use std::sync::Arc;
use std::time::Duration;

use chatdecide::backend::{Client, ClientConfig, Fallback, ScriptedBackend};
use chatdecide::exec::Execution;
use chatdecide::pipeline::{GroupInput, Pipeline, RunConfig};
use chatdecide::report::{self, ReportOptions};
use chatdecide::synth::{generate_corpus, truth_script, ScenarioParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn bench_extract_and_score(c: &mut Criterion) {
    let corpus = generate_corpus(1, 47, &ScenarioParams::default()).expect("synthetic corpus");
    let inputs = GroupInput::from_corpus(&corpus);
    let base = RunConfig {
        runs_per_technique: 2,
        ..RunConfig::default()
    };
    let script = truth_script(&corpus, &base.techniques, base.runs_per_technique);
    let backend = Arc::new(ScriptedBackend::new(script, Fallback::Error));
    let client = Client::new(Box::new(backend), ClientConfig::default()).expect("client");

    let mut group = c.benchmark_group("extract+score 47 groups");
    group.sample_size(10);
    group.measurement_time(Duration::from_secs(10));
    for exec in [Execution::Sequential, Execution::Parallel] {
        let cfg = RunConfig {
            execution: exec,
            ..base.clone()
        };
        let pipeline = Pipeline::new(cfg, &client, None).expect("pipeline");
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &inputs,
            |b, inputs| {
                b.iter(|| {
                    let run = pipeline.run_corpus(inputs);
                    report::build_report(&run.bundles, &corpus, &ReportOptions::default())
                        .expect("report")
                })
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_extract_and_score);
criterion_main!(benches);
