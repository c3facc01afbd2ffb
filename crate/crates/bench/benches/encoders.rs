use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hybrep::cfv::fv_encode_scale;
use hybrep::coding::{llc_approx, LlcParams};
use hybrep::dictionary::{kmeans, KMeansParams, PartDictionary};
use hybrep::gmm::GmmModel;
use hybrep::proposals::{spectral_cluster, SimilarityGraph};
use hybrep::{FeatureTensor, Matrix};

fn points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn bench_llc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 256;
    let mut group = c.benchmark_group("llc_approx");
    for k in [120usize, 2680] {
        let atoms = Matrix::from_rows(&points(k, d, &mut rng)).unwrap();
        let dict = PartDictionary::from_atoms(atoms).unwrap();
        let x = points(1, d, &mut rng).remove(0);
        let p = LlcParams { lambda: 1e-4, tau: 1.0, knn: 5 };
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| b.iter(|| llc_approx(black_box(&x), &dict, &p)));
    }
    group.finish();
}

fn bench_fv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (m, d, side) = (64usize, 64usize, 29usize);
    let gmm = GmmModel::new(
        vec![1.0 / m as f64; m],
        (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        (0..m * d).map(|_| rng.random_range(0.5..1.5)).collect(),
        vec![1e-4; d],
    )
    .unwrap();
    let tensor = FeatureTensor::from_columns(d, side, side, &points(side * side, d, &mut rng)).unwrap();
    c.bench_function("fv_encode_scale/M64_d64_29x29", |b| b.iter(|| fv_encode_scale(black_box(&tensor), &gmm)));
}

fn bench_kmeans(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = points(2000, 64, &mut rng);
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    group.bench_function("n2000_d64_k40", |b| b.iter(|| kmeans(black_box(&xs), 40, 0, KMeansParams::default())));
    group.finish();
}

fn bench_spectral(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut group = c.benchmark_group("spectral_cluster");
    for n in [64usize, 200] {
        let mut w = vec![0.0f32; n * n];
        for i in 0..n {
            for j in i..n {
                let v = if i == j { 1.0 } else { rng.random_range(0.0..1.0) };
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
        let g = SimilarityGraph::from_weights(n, w).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| spectral_cluster(black_box(&g), 10, 0)));
    }
    group.finish();
}

criterion_group!(benches, bench_llc, bench_fv, bench_kmeans, bench_spectral);
criterion_main!(benches);
