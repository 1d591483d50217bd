//! End-to-end desk run: corpus, vocabulary, mixture, pretraining and instruction tuning.

use std::time::Instant;

use crate::data::mixture::format_text;
use crate::data::{build_mixture, generate_synthetic_corpus, Corpus, CorpusSpec, InstructionDataset, MixtureConfig};
use crate::error::Result;
use crate::image::ImageTensor;
use crate::model::{Model, ModelConfig};
use crate::tokenizer::Vocabulary;
use crate::train::{
    pretrain_clip, pretrain_diffusion, run_training, ClipConfig, DiffusionPretrainConfig, DiffusionPretrainReport,
    StepReport, TrainConfig, TrainData,
};

/// Vocabulary over every formatted source text and every caption.
pub fn corpus_vocab(corpus: &Corpus, n_img: usize, max_size: usize) -> Result<Vocabulary> {
    let mut texts: Vec<String> = corpus.records.iter().map(|r| format_text(r, n_img)).collect();
    texts.extend(corpus.images.captions.values().cloned());
    Vocabulary::build(&texts, max_size)
}

/// Every (image, caption) pair in the corpus image store.
pub fn caption_pairs(corpus: &Corpus) -> Vec<(&ImageTensor, &str)> {
    corpus.images.images.iter().map(|(id, img)| (img, corpus.images.captions[id].as_str())).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskConfig {
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub records: usize,
    pub max_vocab: usize,
    pub max_tokens: usize,
    pub model: ModelConfig,
    pub clip: ClipConfig,
    pub diffusion: DiffusionPretrainConfig,
    pub train: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            corpus: CorpusSpec::default(),
            records: 5000,
            max_vocab: 512,
            max_tokens: 256,
            model: ModelConfig::default(),
            clip: ClipConfig::default(),
            diffusion: DiffusionPretrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes {
    pub clip_s: f64,
    pub diffusion_s: f64,
    pub train_s: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.clip_s + self.diffusion_s + self.train_s
    }
}

pub struct DeskRun {
    pub corpus: Corpus,
    pub vocab: Vocabulary,
    pub dataset: InstructionDataset,
    pub model: Model,
    /// The model after both pretraining phases, before instruction tuning.
    pub pretrained: Model,
    pub clip_losses: Vec<f64>,
    pub diffusion: DiffusionPretrainReport,
    pub train_log: Vec<StepReport>,
    pub times: StageTimes,
}

/// Builds the data and runs the three training phases in order.
pub fn run_desk(cfg: &DeskConfig) -> Result<DeskRun> {
    let corpus = generate_synthetic_corpus(&cfg.corpus, cfg.seed)?;
    let vocab = corpus_vocab(&corpus, cfg.model.n_img, cfg.max_vocab)?;
    let mix = MixtureConfig { max_tokens: cfg.max_tokens, ..MixtureConfig::reference(cfg.records, cfg.seed) };
    let dataset = build_mixture(&corpus.records, &mix, &vocab, cfg.model.n_img)?;
    let model_cfg = ModelConfig { vocab_size: vocab.len(), image_size: cfg.corpus.canvas, ..cfg.model.clone() };
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let pairs = caption_pairs(&corpus);
    let mut times = StageTimes::default();

    let t = Instant::now();
    let clip_losses = pretrain_clip(&mut model, &pairs, &vocab, &ClipConfig { seed: cfg.seed, ..cfg.clip.clone() })?;
    times.clip_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let diffusion =
        pretrain_diffusion(&mut model, &pairs, &vocab, &DiffusionPretrainConfig { seed: cfg.seed, ..cfg.diffusion.clone() })?;
    times.diffusion_s = t.elapsed().as_secs_f64();

    let pretrained = model.clone();
    let t = Instant::now();
    let data = TrainData { records: &dataset.records, images: &corpus.images, vocab_len: vocab.len() };
    let train_log = run_training(&mut model, &data, &TrainConfig { seed: cfg.seed, ..cfg.train.clone() }, None, false)?;
    times.train_s = t.elapsed().as_secs_f64();

    Ok(DeskRun { corpus, vocab, dataset, model, pretrained, clip_losses, diffusion, train_log, times })
}
