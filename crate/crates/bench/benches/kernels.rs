use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ulab_bench::{model, small_bench, tokens};
use ulab_core::coreset::{kmeans::kmeans, mink_prob_scores, top_p_select, MINK_PERCENT};
use ulab_core::evalsuite::mcq_accuracy;
use ulab_core::model::sequence_logprobs;
use ulab_core::runner::{decode_checkpoint, encode_checkpoint};
use ulab_core::unlearn::{Method, Objective, UnlearnConfig};

fn forward_backward(c: &mut Criterion) {
    let bench = small_bench();
    let params = model(&bench);
    let forget = tokens(&bench.forget_records);
    let retain = tokens(&bench.retain_records);
    let batch = [0, 1, 2, 3];

    c.bench_function("model/sequence_logprobs", |b| {
        b.iter(|| black_box(sequence_logprobs(&params, &forget[0]).unwrap()));
    });

    for (name, method) in [("npo", Method::npo()), ("rmu", Method::rmu(&params.config))] {
        let cfg = UnlearnConfig::new(method);
        let obj = Objective::new(&params, &forget, &retain, &cfg).unwrap();
        c.bench_function(&format!("unlearn/{name}_gradient_batch4"), |b| {
            b.iter(|| black_box(obj.gradient(&params, &forget, &retain, &batch, &batch).unwrap()));
        });
    }
}

fn evaluation(c: &mut Criterion) {
    let bench = small_bench();
    let params = model(&bench);
    let forget = tokens(&bench.forget_records);

    c.bench_function("eval/forget_mcq", |b| {
        b.iter(|| black_box(mcq_accuracy(&params, &bench.forget_eval).unwrap()));
    });
    c.bench_function("coreset/mink_scores", |b| {
        b.iter(|| black_box(mink_prob_scores(&params, &forget, MINK_PERCENT).unwrap()));
    });
}

fn selection(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let points: Vec<Vec<f64>> = (0..500).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect();
    let scores: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();

    c.bench_function("coreset/kmeans_500x64_k4", |b| {
        b.iter(|| black_box(kmeans(&points, 4, 0).unwrap()));
    });
    c.bench_function("coreset/top_p_10k", |b| {
        b.iter(|| black_box(top_p_select(&scores, 0.05).unwrap()));
    });
}

fn checkpoint(c: &mut Criterion) {
    let bench = small_bench();
    let params = model(&bench);
    let bytes = encode_checkpoint(&params).unwrap();

    c.bench_function("runner/encode_checkpoint", |b| {
        b.iter(|| black_box(encode_checkpoint(&params).unwrap()));
    });
    c.bench_function("runner/decode_checkpoint", |b| {
        b.iter_batched(|| bytes.clone(), |v| black_box(decode_checkpoint(&v).unwrap()), BatchSize::SmallInput);
    });
}

criterion_group!(benches, forward_backward, evaluation, selection, checkpoint);
criterion_main!(benches);
