//! Synthetic inputs shared by the benchmarks.

use mitra_core::embed::{normalize, EmbeddingVector};
use mitra_core::index::VectorIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
    normalize((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("non-zero")
}

pub fn random_index(n: usize, dim: usize, seed: u64) -> VectorIndex {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut index = VectorIndex::new(dim);
    for i in 0..n {
        index
            .push(&format!("doc#{i}"), "bench", &random_unit(&mut rng, dim))
            .expect("unique ids");
    }
    index
}

/// Chunks of Zipf-like random words from a fixed vocabulary.
pub fn random_chunks(n: usize, vocab: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(20..120);
            let words: Vec<String> = (0..len)
                .map(|_| format!("w{}", (rng.random_range(0.0f64..1.0).powi(3) * vocab as f64) as usize))
                .collect();
            (format!("doc#{i}"), words.join(" "))
        })
        .collect()
}

/// Random rankings over `0..universe` with a random relevant set.
pub fn random_rankings(n: usize, universe: u32, seed: u64) -> Vec<(Vec<u32>, Vec<u32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ranking = (0..20).map(|_| rng.random_range(0..universe)).collect();
            let relevant = (0..rng.random_range(1..6))
                .map(|_| rng.random_range(0..universe))
                .collect();
            (ranking, relevant)
        })
        .collect()
}
