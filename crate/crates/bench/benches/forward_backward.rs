use alter_bench::fixture;
use alter_core::numerics::Graph;
use alter_core::pretrain::Pretrainer;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for &(d, patches) in &[(32, 16), (32, 64), (64, 64)] {
        let f = fixture(16, d, patches).expect("fixture");
        group.bench_with_input(BenchmarkId::new("sample", format!("d{d}_p{patches}")), &f, |b, f| {
            b.iter(|| {
                let mut g = Graph::with_params(&f.model.store);
                let out = f.model.forward(&mut g, &f.data[0].full_input(), true).expect("forward");
                let fused = out.fused.expect("fused");
                let e = f.model.sample_embedding(&mut g, &fused);
                let y = g.sum(e);
                let grads = g.backward(y);
                g.param_grads(&grads)
            })
        });
    }
    group.finish();
}

fn pretrain_step(c: &mut Criterion) {
    let f = fixture(16, 32, 16).expect("fixture");
    c.bench_function("pretrain_step_batch16_d32", |b| {
        b.iter_batched(
            || Pretrainer::new(f.model.clone(), f.train.clone(), &f.data, (0..16).collect()).expect("trainer"),
            |mut pt| pt.step().expect("step"),
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, forward_backward, pretrain_step);
criterion_main!(benches);
