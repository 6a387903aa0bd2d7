use std::hint::black_box;
use std::io::Cursor;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use dspt_core::synth::{planted_gap_corpus, run_planted_experiment, PlantedConfig};
use dspt_core::{
    classify_trajectory, default_special_tokens, parse_trace_file, search_beta, segment_text, write_traces, Mode,
    ThresholdConfig,
};

fn reasoning_text(sentences: usize) -> String {
    let mut text = String::from("<think>");
    for i in 0..sentences {
        match i % 4 {
            0 => text.push_str("Let me check the bound again. "),
            1 => text.push_str("Is the sum {x + y} still positive? "),
            2 => text.push_str("Wait, the factor [n - 1] matters here! "),
            _ => text.push_str("So the answer follows"),
        }
        if i % 4 == 3 {
            text.push_str(". ");
        }
    }
    text.push_str("</think>Final answer.");
    text
}

fn segmentation(c: &mut Criterion) {
    let special = default_special_tokens();
    let mut group = c.benchmark_group("segment_text");
    for sentences in [100, 1000, 10_000] {
        let text = reasoning_text(sentences);
        group.throughput(Throughput::Bytes(text.len() as u64));
        group.bench_with_input(BenchmarkId::from_parameter(sentences), &text, |b, text| {
            b.iter(|| segment_text(black_box(text), &special))
        });
    }
    group.finish();
}

fn classification(c: &mut Criterion) {
    let corpus = planted_gap_corpus(200, 50, 0.3, 1).expect("gap corpus");
    let cfg = ThresholdConfig::new(0.1, 0.2).expect("thresholds");
    let actions: usize = corpus.iter().map(|t| t.actions.len()).sum();
    let mut group = c.benchmark_group("classify");
    group.throughput(Throughput::Elements(actions as u64));
    group.bench_function("train_200x50", |b| {
        b.iter(|| {
            for t in &corpus {
                black_box(classify_trajectory(t, &cfg, Mode::Train).expect("classify"));
            }
        })
    });
    group.finish();
}

fn beta_search(c: &mut Criterion) {
    let cfg = ThresholdConfig::default();
    let mut group = c.benchmark_group("search_beta");
    group.sample_size(20);
    for trajectories in [100, 1000] {
        let corpus = planted_gap_corpus(trajectories, 40, 0.3, 2).expect("gap corpus");
        group.bench_with_input(BenchmarkId::from_parameter(trajectories), &corpus, |b, corpus| {
            b.iter(|| search_beta(black_box(corpus), &cfg, 20).expect("search"))
        });
    }
    group.finish();
}

fn trace_io(c: &mut Criterion) {
    let run = run_planted_experiment(&PlantedConfig {
        trajectories: 100,
        sentences: 20,
        beta: Some(0.1),
        ..PlantedConfig::default()
    })
    .expect("planted run");
    let mut bytes = Vec::new();
    write_traces(&mut bytes, &run.traces).expect("write");
    let mut group = c.benchmark_group("trace_file");
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    group.bench_function("parse", |b| {
        b.iter(|| parse_trace_file(Cursor::new(black_box(&bytes))).expect("parse"))
    });
    group.bench_function("write", |b| {
        b.iter(|| {
            let mut out = Vec::with_capacity(bytes.len());
            write_traces(&mut out, &run.traces).expect("write");
            out
        })
    });
    group.finish();
}

criterion_group!(benches, segmentation, classification, beta_search, trace_io);
criterion_main!(benches);
