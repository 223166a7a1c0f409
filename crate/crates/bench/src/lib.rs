//! Random stores for the retrieval benchmarks.

use std::sync::Arc;

use demosel::causal::AttributeIntervention;
use demosel::embedstore::EmbeddingRecord;
use demosel::{EmbeddingKind, EmbeddingStore, QueryEmbedding};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let n = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt() as f32;
    v.into_iter().map(|x| x / n).collect()
}

/// `n` items with image and question vectors, ids `c00000`...
pub fn random_store(n: usize, dim: usize, seed: u64) -> EmbeddingStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = EmbeddingStore::with_dim(dim);
    for i in 0..n {
        for kind in [EmbeddingKind::Image, EmbeddingKind::Question] {
            store
                .insert(EmbeddingRecord {
                    id: format!("c{i:05}"),
                    kind,
                    vector: unit_vector(&mut rng, dim),
                })
                .expect("unit vectors insert");
        }
    }
    store
}

pub fn random_query(dim: usize, seed: u64) -> QueryEmbedding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    QueryEmbedding {
        id: "query".to_string(),
        image: unit_vector(&mut rng, dim),
        question: unit_vector(&mut rng, dim),
    }
}

pub fn random_intervention(attribute: &str, dim: usize, seed: u64) -> AttributeIntervention {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AttributeIntervention {
        attribute: attribute.to_string(),
        caption: format!("{attribute} changed"),
        caption_vec: Arc::from(unit_vector(&mut rng, dim)),
    }
}
