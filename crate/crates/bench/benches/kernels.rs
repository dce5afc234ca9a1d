use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use ltpeft_bench::{desk_backbone, expert_scores, tensor};
use ltpeft_core::autodiff::matmul;
use ltpeft_core::backbone::{block_forward, init_adapters, ExtraTokens};
use ltpeft_core::losses::{classification_loss, ClassCounts, GclConfig};
use ltpeft_core::metrics::knn_accuracy;
use ltpeft_core::moe::{run_phase3, search_w_base, MoeConfig};
use ltpeft_core::params::bind;
use ltpeft_core::prompts::match_group_prompts;
use ltpeft_core::rng::stream;
use ltpeft_core::Tape;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let (a, b) = (tensor(1, [n, n]), tensor(2, [n, n]));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_block(c: &mut Criterion) {
    let (cfg, params) = desk_backbone();
    let adapters = init_adapters(&cfg, &mut stream(4, 0));
    let batch = 16;
    let x = tensor(5, [batch * cfg.tokens(), cfg.dim]);
    let u = tensor(6, [cfg.prompt_len, cfg.dim]);
    let mut group = c.benchmark_group("prompted_block_b16");
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let blk = bind(&tape, &params.blocks[0], false);
            let ad = bind(&tape, &adapters[0], true);
            let y = block_forward(
                &cfg,
                &blk,
                Some(&ad),
                tape.constant(x.clone()),
                ExtraTokens::Shared(tape.param(u.clone())),
                batch,
            )
            .unwrap();
            black_box(y.value());
        })
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let blk = bind(&tape, &params.blocks[0], false);
            let ad = bind(&tape, &adapters[0], true);
            let y = block_forward(
                &cfg,
                &blk,
                Some(&ad),
                tape.constant(x.clone()),
                ExtraTokens::Shared(tape.param(u.clone())),
                batch,
            )
            .unwrap();
            black_box(tape.backward(y.sum()).unwrap());
        })
    });
    group.finish();
}

fn bench_loss(c: &mut Criterion) {
    let classes = 30;
    let counts = ClassCounts::new((0..classes).map(|i| 100 / (i + 1)).collect()).unwrap();
    let scores = tensor(7, [32, classes]);
    let labels: Vec<usize> = (0..32).map(|i| i % classes).collect();
    let cfg = GclConfig::default();
    c.bench_function("agcl_loss_backward_b32_c30", |bench| {
        let mut rng = stream(8, 0);
        bench.iter(|| {
            let tape = Tape::new();
            let s = tape.param(scores.clone());
            let loss = classification_loss(s, &labels, &counts, &cfg, &mut rng, true).unwrap();
            black_box(tape.backward(loss).unwrap());
        })
    });
}

fn bench_matching(c: &mut Criterion) {
    let keys: Vec<_> = (0..20).map(|i| tensor(100 + i, [32])).collect();
    let query = tensor(9, [32]);
    c.bench_function("match_group_prompts_m20_k2", |bench| {
        bench.iter(|| match_group_prompts(black_box(query.data()), &keys, 2).unwrap())
    });
}

fn bench_moe(c: &mut Criterion) {
    let scores = expert_scores(2000, 30);
    c.bench_function("search_w_base_n2000", |bench| {
        bench.iter(|| search_w_base(black_box(&scores), 1e-3))
    });
    let cfg = MoeConfig {
        epochs: 5,
        ..MoeConfig::default()
    };
    let mut group = c.benchmark_group("phase3");
    group.sample_size(10);
    group.bench_function("n2000_5_epochs", |bench| bench.iter(|| run_phase3(&scores, &cfg).unwrap()));
    group.finish();
}

fn bench_knn(c: &mut Criterion) {
    let train = tensor(10, [1000, 32]);
    let val = tensor(11, [300, 32]);
    let train_labels: Vec<usize> = (0..1000).map(|i| i % 30).collect();
    let val_labels: Vec<usize> = (0..300).map(|i| i % 30).collect();
    c.bench_function("knn_1000x300_k20", |bench| {
        bench.iter(|| knn_accuracy(&train, &train_labels, &val, &val_labels, 20).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_block, bench_loss, bench_matching, bench_moe, bench_knn);
criterion_main!(benches);
