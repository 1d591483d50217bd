#![allow(dead_code)]

use genvit_core::data::{build_mixture, generate_synthetic_corpus, Corpus, CorpusSpec, InstructionDataset, MixtureConfig};
use genvit_core::model::{Model, ModelConfig};
use genvit_core::pipeline::corpus_vocab;
use genvit_core::tokenizer::Vocabulary;
use genvit_core::train::TrainData;

pub fn tiny_spec() -> CorpusSpec {
    CorpusSpec { canvas: 16, n_generation: 24, n_understanding: 24, n_editing: 12, n_natural_language: 6, ..CorpusSpec::default() }
}

pub fn tiny_model_config(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig { vocab_size: vocab.len(), context_len: 96, ..ModelConfig::tiny() }
}

pub struct Fixture {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub dataset: InstructionDataset,
    pub model: Model,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let corpus = generate_synthetic_corpus(&tiny_spec(), seed).unwrap();
        let cfg = ModelConfig::tiny();
        let vocab = corpus_vocab(&corpus, cfg.n_img, 512).unwrap();
        let mix = MixtureConfig { max_tokens: 96, ..MixtureConfig::reference(60, seed) };
        let dataset = build_mixture(&corpus.records, &mix, &vocab, cfg.n_img).unwrap();
        let model = Model::init(tiny_model_config(&vocab), seed).unwrap();
        Self { corpus, vocab, dataset, model }
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData { records: &self.dataset.records, images: &self.corpus.images, vocab_len: self.vocab.len() }
    }
}
