use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use retention_bench::encoder_fixture;
use retention_core::cost::ProfileConfig;
use retention_core::encoder::{forward_infer, forward_ungated, EncoderConfig, Selector};
use retention_core::gate::score_tokens_on_tape;
use retention_core::Tape;

fn forwards(c: &mut Criterion) {
    let base = ProfileConfig::default().encoder;
    let mut group = c.benchmark_group("forward");
    group.sample_size(10);
    for t in [128, 512] {
        let config = EncoderConfig {
            max_seq_len: t,
            ..base.clone()
        };
        let unpruned = EncoderConfig {
            rho: 1.0,
            ..config.clone()
        };
        let (params, tokens) = encoder_fixture(&config, 0);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("dense", t), &t, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape).unwrap();
                forward_ungated(&mut tape, &vars, &config, &tokens, None).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("gated_unpruned", t), &t, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape).unwrap();
                forward_infer(&mut tape, &vars, &unpruned, &tokens, Selector::Scored).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("pruned", t), &t, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape).unwrap();
                forward_infer(&mut tape, &vars, &config, &tokens, Selector::Scored).unwrap()
            })
        });
    }
    group.finish();
}

fn scorer(c: &mut Criterion) {
    let config = ProfileConfig::default().encoder;
    let (params, tokens) = encoder_fixture(&config, 1);
    c.bench_function("scorer/512x64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape).unwrap();
            let h = tape.gather_rows(vars.embedding, &tokens).unwrap();
            score_tokens_on_tape(&mut tape, h, &vars.scorers[0]).unwrap()
        })
    });
}

criterion_group!(benches, forwards, scorer);
criterion_main!(benches);
