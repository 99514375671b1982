use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use picodet_core::kernels::{dense_forward, depthwise_forward, ConvGeom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv");
    // (cin, cout, k, stride, size): stem, a pointwise stage and a head tower
    for (cin, cout, k, stride, size) in [(3, 24, 3, 2, 320), (96, 96, 1, 1, 40), (96, 96, 3, 1, 20)] {
        let g = ConvGeom::new(cin, cout, k, stride, k / 2, size, size);
        let x = noise(cin * size * size, &mut rng);
        let w = noise(cout * cin * k * k, &mut rng);
        let mut y = vec![0.0; cout * g.oh * g.ow];
        let mut col = Vec::new();
        group.bench_function(BenchmarkId::new("dense", format!("{cin}x{cout}k{k}s{stride}@{size}")), |b| {
            b.iter(|| dense_forward(&x, &w, &g, &mut y, &mut col))
        });
    }
    for (ch, k, stride, size) in [(48, 3, 2, 80), (96, 5, 1, 40), (192, 5, 1, 10)] {
        let g = ConvGeom::new(ch, ch, k, stride, k / 2, size, size);
        let x = noise(ch * size * size, &mut rng);
        let w = noise(ch * k * k, &mut rng);
        let mut y = vec![0.0; ch * g.oh * g.ow];
        group.bench_function(BenchmarkId::new("depthwise", format!("{ch}k{k}s{stride}@{size}")), |b| {
            b.iter(|| depthwise_forward(&x, &w, &g, &mut y))
        });
    }
    group.finish();
}

criterion_group!(benches, conv);
criterion_main!(benches);
