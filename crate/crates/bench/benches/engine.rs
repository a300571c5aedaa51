//! Forward/backward throughput of the network core: a single bidirectional
//! layer at training width, a full-scale three-layer stack at inference,
//! and one full optimization step.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use blstmseg_core::blstm::{stack_forward, DropoutMask};
use blstmseg_core::linalg::Rng;
use blstmseg_core::tagger::{Tag, Vocab};
use blstmseg_core::training::{train_step, SequenceBatch, StackedModel, TrainConfig};

fn vocab() -> Vocab {
    let chars: Vec<char> = (0..600).map(|k| char::from_u32(0x4E00 + k).unwrap()).collect();
    Vocab::from_chars(chars).unwrap()
}

fn model(embed_dim: usize, depth: usize, seed: u64) -> StackedModel {
    let cfg = TrainConfig {
        embed_dim,
        depth,
        dropout_keep: 1.0,
        learning_rate: 0.1,
        epochs: 0,
        batch_size: 1,
        seed,
        peepholes: false,
        grad_clip: 5.0,
    };
    StackedModel::new_random(vocab(), &cfg).unwrap()
}

fn random_ids(rng: &mut Rng, len: usize, vocab_size: usize) -> Vec<usize> {
    (0..len).map(|_| rng.below(vocab_size)).collect()
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("stack_forward");
    for &(d, depth, t_len) in &[(64usize, 1usize, 40usize), (200, 3, 40)] {
        let m = model(d, depth, 7);
        let mut rng = Rng::new(11);
        let ids = random_ids(&mut rng, t_len, m.vocab.size());
        let inputs = m.embeddings.lookup_ids(&ids);
        group.throughput(Throughput::Elements(t_len as u64));
        group.bench_function(format!("d{d}_depth{depth}_T{t_len}"), |b| {
            b.iter(|| stack_forward(&m.net, &inputs, None))
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    let cfg = TrainConfig {
        embed_dim: 64,
        depth: 1,
        dropout_keep: 0.8,
        learning_rate: 0.1,
        epochs: 0,
        batch_size: 8,
        seed: 5,
        peepholes: false,
        grad_clip: 5.0,
    };
    let base = StackedModel::new_random(vocab(), &cfg).unwrap();
    let mut rng = Rng::new(13);
    let seqs: Vec<(Vec<usize>, Vec<Tag>)> = (0..8)
        .map(|_| {
            let ids = random_ids(&mut rng, 30, base.vocab.size());
            let tags = (0..30).map(|_| Tag::from_index(rng.below(4))).collect();
            (ids, tags)
        })
        .collect();
    let batch = SequenceBatch::from_sequences(&seqs);
    group.throughput(Throughput::Elements(8 * 30));
    group.bench_function("d64_depth1_batch8_T30", |b| {
        b.iter_batched(
            || (base.clone(), Rng::new(17)),
            |(mut m, mut r)| train_step(&mut m, &batch, &cfg, &mut r, 0).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_dropout_mask(c: &mut Criterion) {
    c.bench_function("dropout_mask_sample_d200_T40", |b| {
        let mut rng = Rng::new(3);
        b.iter(|| DropoutMask::sample(&mut rng, 0.8, 2, 40, 200))
    });
}

criterion_group!(benches, bench_forward, bench_train_step, bench_dropout_mask);
criterion_main!(benches);
