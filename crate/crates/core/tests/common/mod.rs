#![allow(dead_code)]

use deer_core::corpus::{generate_synthetic, mention_examples, split_examples, EntityCatalog, SyntheticConfig};
use deer_core::features::{build_corpus_vocabulary, NgramVocabulary};
use deer_core::model::{ModelConfig, ModelDims};
use deer_core::training::TrainingData;

pub struct Fixture {
    pub catalog: EntityCatalog,
    pub vocab: NgramVocabulary,
    pub data: TrainingData,
    pub dims: ModelDims,
}

pub fn fixture(config: &SyntheticConfig, model: &ModelConfig, holdout: f64, seed: u64) -> Fixture {
    let (catalog, docs) = generate_synthetic(config, seed).unwrap();
    let examples = mention_examples(&docs, &catalog).unwrap();
    let split = split_examples(examples, holdout, seed).unwrap();
    let vocab = build_corpus_vocabulary(&split.train, catalog.records(), 200_000, 1_000).unwrap();
    let data = TrainingData::prepare(&split, &catalog, &vocab, model.category_rows).unwrap();
    let dims = ModelDims::new(model, &vocab);
    Fixture { catalog, vocab, data, dims }
}

pub fn tiny() -> Fixture {
    fixture(
        &SyntheticConfig {
            entities: 12,
            families: 4,
            mentions_per_entity: 3,
            ..SyntheticConfig::default()
        },
        &ModelConfig {
            embed_dim: 8,
            encode_dim: 8,
            category_rows: 16,
        },
        0.25,
        5,
    )
}
