//! Hot paths of one federated round: scoring and selecting blocks, delta
//! quantization, wire encoding, and a client's local training epoch.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fedobd_core::rng::derive_rng;
use fedobd_core::{
    decode_delta, deserialize, encode_delta, init_model, local_train, select_blocks, serialize,
    BlobTask, BlockedModel, DropoutConfig, MlpSpec, RoundMessage,
};

/// Two structurally identical ~85k-parameter models with unrelated values,
/// standing in for consecutive versions of a global model.
fn model_pair() -> (BlockedModel, BlockedModel) {
    let widths = vec![64, 256, 256, 10];
    let prev = init_model(&MlpSpec::new(widths.clone(), 1).unwrap()).unwrap();
    let cur = init_model(&MlpSpec::new(widths, 2).unwrap()).unwrap();
    (prev, cur)
}

fn score_and_select(c: &mut Criterion) {
    let (prev, cur) = model_pair();
    let cfg = DropoutConfig::new(0.3).unwrap();
    c.bench_function("score_and_select_85k_params", |b| {
        b.iter(|| select_blocks(black_box(&prev), black_box(&cur), &cfg).unwrap())
    });
}

fn delta_roundtrip(c: &mut Criterion) {
    let (prev, cur) = model_pair();
    // The middle block holds the 256x256 layer — the bulk of the model.
    let prev_block = &prev.blocks()[1];
    let cur_block = &cur.blocks()[1];
    let rng = derive_rng(3, &["bench", "quant"]);

    c.bench_function("encode_delta_65k_params", |b| {
        b.iter_batched(
            || rng.clone(),
            |mut r| encode_delta(black_box(prev_block), black_box(cur_block), 0.01, &mut r),
            BatchSize::SmallInput,
        )
    });

    let delta = encode_delta(prev_block, cur_block, 0.01, &mut rng.clone()).unwrap();
    c.bench_function("decode_delta_65k_params", |b| {
        b.iter(|| decode_delta(black_box(prev_block), black_box(&delta)).unwrap())
    });
}

fn wire_roundtrip(c: &mut Criterion) {
    let (prev, cur) = model_pair();
    let full = RoundMessage::full_model(5, "client_000", 2_000, cur.clone());
    let full_bytes = serialize(&full);

    let mut rng = derive_rng(4, &["bench", "wire"]);
    let deltas: Vec<_> = prev
        .blocks()
        .iter()
        .zip(cur.blocks())
        .map(|(p, q)| encode_delta(p, q, 0.01, &mut rng).unwrap())
        .collect();
    let partial = RoundMessage::block_deltas(5, "client_000", 2_000, deltas);
    let partial_bytes = serialize(&partial);

    c.bench_function("serialize_full_model", |b| b.iter(|| serialize(black_box(&full))));
    c.bench_function("deserialize_full_model", |b| {
        b.iter(|| deserialize(black_box(&full_bytes)).unwrap())
    });
    c.bench_function("serialize_deltas", |b| b.iter(|| serialize(black_box(&partial))));
    c.bench_function("deserialize_deltas", |b| {
        b.iter(|| deserialize(black_box(&partial_bytes)).unwrap())
    });
}

fn local_epoch(c: &mut Criterion) {
    let model = init_model(&MlpSpec::new(vec![8, 32, 32, 3], 5).unwrap()).unwrap();
    let mut rng = derive_rng(6, &["bench", "data"]);
    let task = BlobTask::new(3, 8, 0.8, &mut rng).unwrap();
    let data = task.sample(512, &mut rng).unwrap();
    let train_rng = derive_rng(6, &["bench", "train"]);

    c.bench_function("local_epoch_512_samples", |b| {
        b.iter_batched(
            || train_rng.clone(),
            |mut r| local_train(black_box(&model), &data, 1, 0.05, 32, &mut r).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, score_and_select, delta_roundtrip, wire_roundtrip, local_epoch);
criterion_main!(benches);
