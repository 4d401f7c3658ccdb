use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use tpt_bench::fixture;
use tpt_core::first_pass::{beam_search, stream_decode, transducer_loss, BeamConfig};
use tpt_core::first_pass::train::batch_gradients;
use tpt_core::rescorer::{rescore_select, SelectConfig};

fn transducer(c: &mut Criterion) {
    let f = fixture(8);
    let mut group = c.benchmark_group("transducer");
    group.bench_function("loss", |b| {
        b.iter(|| transducer_loss(&f.first_pass, black_box(&f.embeddings[0]), &f.utterances[0].tokens).unwrap())
    });
    let batch: Vec<_> = f.utterances.iter().collect();
    group.sample_size(10);
    group.bench_function("batch_gradients_8", |b| {
        b.iter(|| batch_gradients(&f.first_pass, black_box(&batch)).unwrap())
    });
    group.finish();
}

fn search(c: &mut Criterion) {
    let f = fixture(4);
    let mut group = c.benchmark_group("search");
    for beam in [1, 4, 10] {
        let cfg = BeamConfig {
            beam,
            ..Default::default()
        };
        group.bench_function(format!("beam_{beam}"), |b| {
            b.iter(|| beam_search(&f.first_pass, black_box(&f.embeddings[0]), cfg).unwrap())
        });
    }
    group.bench_function("streaming_beam_10", |b| {
        b.iter_batched(
            || f.utterances[0].features.tensor().clone(),
            |x| stream_decode(&f.first_pass, &x, BeamConfig::default()).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn rescoring(c: &mut Criterion) {
    let f = fixture(4);
    c.bench_function("rescore_10best", |b| {
        b.iter(|| rescore_select(&f.rescorer, black_box(&f.embeddings[0]), &f.nbest[0], SelectConfig::default()).unwrap())
    });
}

criterion_group!(benches, transducer, search, rescoring);
criterion_main!(benches);
