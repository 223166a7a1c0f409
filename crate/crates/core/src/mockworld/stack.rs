use super::{generate_world, MockEmbedder, MockUsage, MockVlm, World, WorldSpec};
use crate::embedstore::{build_cache, BuildOptions, EmbeddingStore};
use crate::error::{Error, Result};
use crate::evaluation::Resources;

/// A world with its embedding stores and model, all in-process.
#[derive(Debug, Clone)]
pub struct MockStack {
    pub world: World,
    pub store: EmbeddingStore,
    pub query_store: EmbeddingStore,
    pub vlm: MockVlm,
    pub embedder: MockEmbedder,
}

impl MockStack {
    pub fn new(spec: &WorldSpec, decisive_rank: usize, usage: MockUsage) -> Result<Self> {
        let world = generate_world(spec)?;
        let embedder = MockEmbedder::new(world.schema.clone());
        let opts = BuildOptions::default();
        let embed = |c| -> Result<EmbeddingStore> {
            let out = build_cache(c, &embedder, &opts)?;
            match out.failures.first() {
                Some(f) => Err(Error::invalid(format!(
                    "mock embedding failed for {}: {}",
                    f.id, f.cause
                ))),
                None => Ok(out.store),
            }
        };
        let store = embed(&world.train)?;
        let query_store = embed(&world.queries)?;
        let vlm = MockVlm::new(world.schema.clone())
            .with_decisive_rank(decisive_rank)
            .with_usage(usage);
        Ok(MockStack {
            world,
            store,
            query_store,
            vlm,
            embedder,
        })
    }

    pub fn resources(&self) -> Resources<'_> {
        Resources {
            corpus: &self.world.train,
            store: &self.store,
            queries: &self.world.queries,
            query_store: &self.query_store,
            vlm: &self.vlm,
            embedder: &self.embedder,
        }
    }
}
