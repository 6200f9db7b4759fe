use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabsage_core::selector::{score_cluster, score_cosine, score_manhattan, select_top_k, EmbeddingVector, KMeansParams};
use tabsage_core::Exec;

fn vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<EmbeddingVector> {
    (0..count)
        .map(|_| EmbeddingVector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn strategies() -> Vec<Exec> {
    if Exec::parallel_available() {
        vec![Exec::Sequential, Exec::Parallel]
    } else {
        vec![Exec::Sequential]
    }
}

// 1000 test queries against a 100-candidate pool of 128-d embeddings.
fn query_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pool = vectors(&mut rng, 100, 128);
    let queries = vectors(&mut rng, 1000, 128);
    let mut group = c.benchmark_group("top4_per_query");
    for exec in strategies() {
        group.bench_with_input(BenchmarkId::new("cosine", format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| exec.map(&queries, |_, q| select_top_k(&score_cosine(q, &pool).unwrap(), 4, None).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("manhattan", format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| exec.map(&queries, |_, q| select_top_k(&score_manhattan(q, &pool).unwrap(), 4, None).unwrap()))
        });
    }
    group.finish();
}

// One k-means selection per seed, as in a multi-seed run.
fn cluster_seeds(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pools: Vec<Vec<EmbeddingVector>> = (0..16).map(|_| vectors(&mut rng, 100, 128)).collect();
    let params = KMeansParams::default();
    let mut group = c.benchmark_group("kmeans_16_pools");
    group.sample_size(10);
    for exec in strategies() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| {
                exec.map(&pools, |i, pool| {
                    let cs = score_cluster(pool, 4, i as u64, &params).unwrap();
                    select_top_k(&cs.scores, 4, Some(&cs.assignment)).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, query_batch, cluster_seeds);
criterion_main!(benches);
