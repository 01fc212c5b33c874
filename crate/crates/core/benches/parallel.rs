use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitq::data::ToyDataSpec;
use vitq::kernels::{gemm_nt, Strategy};
use vitq::vit::{Path, QuantMode, TinyViT, ViTConfig};

fn strategies() -> Vec<(&'static str, Strategy)> {
    let mut s = vec![("sequential", Strategy::Sequential)];
    #[cfg(feature = "parallel")]
    s.push(("parallel", Strategy::Parallel));
    s
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("gemm_nt");
    for n in [64usize, 256] {
        let a: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (name, s) in strategies() {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |bench, &n| {
                bench.iter(|| gemm_nt(s, black_box(&a), black_box(&b), 1, n, n, n))
            });
        }
    }
    group.finish();
}

fn predict(c: &mut Criterion) {
    let spec = ToyDataSpec { per_class: 8, image_size: 16, ..ToyDataSpec::default() };
    let images = spec.generate().calibration.images().to_vec();
    let cfg = ViTConfig { image_size: 16, embed_dim: 32, depth: 2, heads: 2, mlp_ratio: 2, ..ViTConfig::default() };
    let model = TinyViT::new(cfg, QuantMode::default()).unwrap();
    c.bench_function("predict_64_images", |b| {
        b.iter(|| model.predict(black_box(&images), Path::FullPrecision).unwrap())
    });
}

criterion_group!(benches, gemm, predict);
criterion_main!(benches);
