//! Sequential vs rayon scoring for top-k retrieval and the similarity matrix.
//!
//! `cargo bench -p deliberag-core` runs both arms; with
//! `--no-default-features` only the sequential arm is built.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{rngs::StdRng, Rng, SeedableRng};

use deliberag_core::backend::EmbeddingVector;
use deliberag_core::corpus::Category;
use deliberag_core::index::{cosine_similarity, IndexEntry, VectorIndex};
use deliberag_core::metrics::similarity_of_embeddings;

fn random_vector(rng: &mut StdRng, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_index(rng: &mut StdRng, n: usize, dim: usize) -> VectorIndex {
    let entries = (0..n)
        .map(|i| IndexEntry {
            chunk_id: format!("doc{}#{}", i / 50, i % 50),
            category: if i % 2 == 0 { Category::Regulatory } else { Category::Safety },
            vector: random_vector(rng, dim),
        })
        .collect();
    VectorIndex::from_entries(entries).unwrap()
}

fn top_k(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(7);
    let mut group = c.benchmark_group("top_k");
    for &(n, dim) in &[(1_000, 64), (10_000, 256), (50_000, 1024)] {
        let index = random_index(&mut rng, n, dim);
        let query = random_vector(&mut rng, dim);
        let label = format!("{n}x{dim}");
        group.bench_with_input(BenchmarkId::new("sequential", &label), &index, |b, idx| {
            b.iter(|| idx.top_k_sequential(black_box(&query), 4, None).unwrap())
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &label), &index, |b, idx| {
            b.iter(|| idx.top_k_parallel(black_box(&query), 4, None).unwrap())
        });
    }
    group.finish();
}

fn matrix_sequential(q: &[EmbeddingVector], r: &[EmbeddingVector]) -> Vec<f64> {
    q.iter()
        .flat_map(|qi| r.iter().map(move |rj| cosine_similarity(qi, rj).unwrap()))
        .collect()
}

fn similarity_matrix(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(11);
    let mut group = c.benchmark_group("similarity_matrix");
    for &(m, dim) in &[(20, 64), (200, 1024)] {
        let q: Vec<EmbeddingVector> = (0..m).map(|_| random_vector(&mut rng, dim)).collect();
        let r: Vec<EmbeddingVector> = (0..m).map(|_| random_vector(&mut rng, dim)).collect();
        let label = format!("{m}x{m}x{dim}");
        group.bench_function(BenchmarkId::new("sequential", &label), |b| {
            b.iter(|| matrix_sequential(black_box(&q), black_box(&r)))
        });
        // par::try_map_indexed underneath; sequential itself when the feature is off
        group.bench_function(BenchmarkId::new("pooled", &label), |b| {
            b.iter(|| similarity_of_embeddings(black_box(&q), black_box(&r)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, top_k, similarity_matrix);
criterion_main!(benches);
