use brainshot_core::backbones::logits_on_tape;
use brainshot_core::{seed, Arch, Backbone, BackboneConfig, GradOrder, ParamSet, Tape, Tensor2};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn batch(rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor2::new(rows, cols, data).unwrap()
}

fn forward_backward(c: &mut Criterion) {
    let x = batch(64, 360);
    let labels: Vec<usize> = (0..64).map(|i| i % 64).collect();
    let mut group = c.benchmark_group("mlp-64x360");
    for (layers, width) in [(1, 360), (2, 360), (2, 1024)] {
        let cfg = BackboneConfig::new(Arch::Mlp, layers, width, 360, 64).unwrap();
        let backbone = Backbone::init(cfg, &mut seed::stream(0, seed::domain::INIT, 0)).unwrap();
        let id = format!("{layers}/{width}");
        group.bench_function(BenchmarkId::new("forward", &id), |b| {
            b.iter(|| backbone.logits(&x, None).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward-backward", &id), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = backbone.params().register(&mut tape, true);
                let input = tape.constant(x.clone());
                let logits = logits_on_tape(backbone.config(), &mut tape, &vars, input, None).unwrap();
                let loss = tape.softmax_xent(logits, &labels).unwrap();
                tape.backward(loss, &ParamSet::flat_vars(&vars), GradOrder::First).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
