//! Wall-clock comparison of the differential fuzz corpus run across a
//! thread pool versus single-threaded, plus a small Monte-Carlo run.
//! Every sequence is an independent simulation, so the parallel path
//! should scale with cores while producing the same verdicts.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use pagesim::CostModelParams;
use pagesim_bench::{
    run_corpus, run_corpus_sequential, run_montecarlo, AllocatorKind, BenchConfig, CorpusConfig,
};

fn corpus_cfg(sequences: u64) -> CorpusConfig {
    CorpusConfig {
        sequences,
        ops_per_sequence: 96,
        max_block_bytes: 64 * 1024,
        base_seed: 0x5EED,
    }
}

fn bench_corpus(c: &mut Criterion) {
    let mut group = c.benchmark_group("fuzz-corpus");
    group.sample_size(10);
    for sequences in [64u64, 256] {
        group.bench_with_input(
            BenchmarkId::new("sequential", sequences),
            &sequences,
            |b, &n| {
                b.iter(|| {
                    let report = run_corpus_sequential(black_box(&corpus_cfg(n)));
                    assert!(report.passed());
                    report.sequences_run
                })
            },
        );
        // With the `parallel` feature (default) this fans out over rayon;
        // without it, it degenerates to the sequential path.
        group.bench_with_input(
            BenchmarkId::new("parallel", sequences),
            &sequences,
            |b, &n| {
                b.iter(|| {
                    let report = run_corpus(black_box(&corpus_cfg(n)));
                    assert!(report.passed());
                    report.sequences_run
                })
            },
        );
    }
    group.finish();
}

fn bench_montecarlo(c: &mut Criterion) {
    let mut group = c.benchmark_group("montecarlo");
    group.sample_size(10);
    for kind in [AllocatorKind::KernelPaged, AllocatorKind::Umpa] {
        group.bench_function(BenchmarkId::new("2k-iterations", kind.name()), |b| {
            let config = BenchConfig {
                iterations: 2000,
                allocator: kind,
                preload_cache: kind == AllocatorKind::Umpa,
                ..BenchConfig::default()
            };
            let params = CostModelParams::default();
            b.iter(|| {
                run_montecarlo(black_box(&config), black_box(&params))
                    .unwrap()
                    .len()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_corpus, bench_montecarlo);
criterion_main!(benches);
