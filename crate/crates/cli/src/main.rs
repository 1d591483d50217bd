//! `genvit`: corpus synthesis, data building, pretraining, instruction tuning,
//! inference and evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use genvit_core::config::{default_entries, RunConfig};
use genvit_core::data::{
    build_mixture, generate_synthetic_corpus, read_corpus, read_dataset, write_corpus, write_dataset, DatasetFiles,
};
use genvit_core::eval::{evaluate, EvalSet};
use genvit_core::image::ImageTensor;
use genvit_core::infer::{edit_image, generate_image, respond};
use genvit_core::model::{Model, ModelConfig};
use genvit_core::pipeline::corpus_vocab;
use genvit_core::tokenizer::Vocabulary;
use genvit_core::train::gradcheck::DIFFUSION_PATH;
use genvit_core::train::instruct::MODEL_FILE;
use genvit_core::train::{grad_check, pretrain_clip, pretrain_diffusion, run_training, FeatureCache, TrainData};
use genvit_core::{Error, Result};

const VOCAB_FILE: &str = "vocab.txt";
const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Parser)]
#[command(name = "genvit", version, about = "Desk-scale generative visual instruction tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed (config key `seed`, default 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of [IMG] tokens N (config key `model.n_img`, default 16)
    #[arg(long)]
    n_img_tokens: Option<usize>,
    /// Classifier-free guidance scale (config key `sampler.guidance_scale`, default 3)
    #[arg(long)]
    guidance_scale: Option<f64>,
    /// Any config key, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Clone)]
struct Phase {
    /// Optimizer steps of this phase (default from config)
    #[arg(long)]
    steps: Option<usize>,
    /// Peak learning rate of this phase (default from config)
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size of this phase (default from config)
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic shapes corpus
    SynthCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long, default_value = "runs/corpus")]
        out: PathBuf,
    },
    /// Build the instruction mixture from a corpus directory
    BuildData {
        #[command(flatten)]
        common: Common,
        /// Corpus directory; synthesized from the config when omitted
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Mark the dataset as held-out evaluation data
        #[arg(long, default_value_t = false)]
        held_out: bool,
        /// Output directory
        #[arg(long, default_value = "runs/data")]
        out: PathBuf,
    },
    /// Contrastive pretraining of the vision and caption encoders
    PretrainClip {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        phase: Phase,
        /// Dataset directory
        #[arg(long, default_value = "runs/data")]
        data: PathBuf,
        /// Output model directory
        #[arg(long, default_value = "runs/clip")]
        out: PathBuf,
    },
    /// VAE, latent scale and caption-conditioned UNet pretraining
    PretrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        phase: Phase,
        /// Dataset directory
        #[arg(long, default_value = "runs/data")]
        data: PathBuf,
        /// Model directory from pretrain-clip
        #[arg(long, default_value = "runs/clip")]
        model: PathBuf,
        /// Output model directory
        #[arg(long, default_value = "runs/diffusion")]
        out: PathBuf,
    },
    /// Single-stage instruction tuning of projector, LM and generation head
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        phase: Phase,
        /// Dataset directory
        #[arg(long, default_value = "runs/data")]
        data: PathBuf,
        /// Model directory from pretrain-diffusion
        #[arg(long, default_value = "runs/diffusion")]
        model: PathBuf,
        /// Continue from the checkpoint in the output directory
        #[arg(long, default_value_t = false)]
        resume: bool,
        /// Output model directory
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Generate an image from a caption
    Generate {
        #[command(flatten)]
        common: Common,
        /// Trained model directory
        #[arg(long, default_value = "runs/train")]
        model: PathBuf,
        /// Caption of the image to generate
        #[arg(long)]
        prompt: String,
        /// Output PPM file
        #[arg(long, default_value = "out.ppm")]
        out: PathBuf,
    },
    /// Edit an image with an instruction
    Edit {
        #[command(flatten)]
        common: Common,
        /// Trained model directory
        #[arg(long, default_value = "runs/train")]
        model: PathBuf,
        /// Source PPM image
        #[arg(long)]
        image: PathBuf,
        /// Edit instruction, e.g. "make the circle blue"
        #[arg(long)]
        instruction: String,
        /// Output PPM file
        #[arg(long, default_value = "edited.ppm")]
        out: PathBuf,
    },
    /// Answer a task-token prompt, routing to text or image output
    Ask {
        #[command(flatten)]
        common: Common,
        /// Trained model directory
        #[arg(long, default_value = "runs/train")]
        model: PathBuf,
        /// Prompt starting with [T2I] or [I2T]; <IMAGE> marks the input image
        #[arg(long)]
        prompt: String,
        /// Input PPM image
        #[arg(long)]
        image: Option<PathBuf>,
        /// Output PPM file when the response contains an image
        #[arg(long, default_value = "answer.ppm")]
        out: PathBuf,
    },
    /// Compute FID, CLIP similarity, dino_proxy and VQA exact match
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained model directory
        #[arg(long, default_value = "runs/train")]
        model: PathBuf,
        /// Held-out dataset directory; synthetic held-out items when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the report and images
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of the instruction-tuning loss
    GradCheck {
        #[command(flatten)]
        common: Common,
        /// Model directory
        #[arg(long, default_value = "runs/diffusion")]
        model: PathBuf,
        /// Dataset directory
        #[arg(long, default_value = "runs/data")]
        data: PathBuf,
        /// Output directory for the report
        #[arg(long, default_value = "runs/gradcheck")]
        out: PathBuf,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::SynthCorpus { common, .. }
            | Cmd::BuildData { common, .. }
            | Cmd::PretrainClip { common, .. }
            | Cmd::PretrainDiffusion { common, .. }
            | Cmd::Train { common, .. }
            | Cmd::Generate { common, .. }
            | Cmd::Edit { common, .. }
            | Cmd::Ask { common, .. }
            | Cmd::Evaluate { common, .. }
            | Cmd::GradCheck { common, .. } => common,
        }
    }

    fn phase(&self) -> Option<(&Phase, &'static [&'static str; 3])> {
        match self {
            Cmd::PretrainClip { phase, .. } => Some((phase, &["clip.steps", "clip.learning_rate", "clip.batch_size"])),
            Cmd::PretrainDiffusion { phase, .. } => {
                Some((phase, &["diffusion.unet_steps", "diffusion.learning_rate", "diffusion.batch_size"]))
            }
            Cmd::Train { phase, .. } => Some((phase, &["train.steps", "train.learning_rate", "train.batch_size"])),
            _ => None,
        }
    }
}

fn flag_overrides(cmd: &Cmd) -> Result<Vec<(String, String)>> {
    let c = cmd.common();
    let mut f = Vec::new();
    if let Some(s) = c.seed {
        f.push(("seed".to_string(), s.to_string()));
    }
    if let Some(n) = c.n_img_tokens {
        f.push(("model.n_img".into(), n.to_string()));
    }
    if let Some(w) = c.guidance_scale {
        f.push(("sampler.guidance_scale".into(), w.to_string()));
    }
    if let Some((p, keys)) = cmd.phase() {
        let vals = [p.steps.map(|v| v.to_string()), p.lr.map(|v| v.to_string()), p.batch_size.map(|v| v.to_string())];
        for (k, v) in keys.iter().zip(vals) {
            if let Some(v) = v {
                f.push((k.to_string(), v));
            }
        }
    }
    for kv in &c.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        f.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(f)
}

fn resolve_config(cmd: &Cmd) -> Result<RunConfig> {
    let flags = flag_overrides(cmd)?;
    let file = match &cmd.common().config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    RunConfig::resolve(file.as_deref(), std::env::vars(), &flags)
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config into `dir`, or next to a file output.
fn record_config(cfg: &RunConfig, out: &Path, is_dir: bool) -> Result<()> {
    let path = if is_dir {
        out.join(RUN_CONFIG_FILE)
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".cfg");
        out.with_file_name(name)
    };
    write_text(&path, &cfg.to_file_string())
}

fn load_model_dir(dir: &Path) -> Result<(Model, Vocabulary)> {
    let model = Model::load(&dir.join(MODEL_FILE))?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "{} has {} entries but the model expects {}",
            dir.join(VOCAB_FILE).display(),
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok((model, vocab))
}

/// Model shape changes after initialization are rejected, except for N and the sampler.
fn check_shape(model: &Model, cfg: &RunConfig) -> Result<()> {
    let want = ModelConfig { vocab_size: model.config.vocab_size, image_size: model.config.image_size, ..cfg.model()? };
    if want != model.config {
        return Err(Error::Config("model.* keys differ from the checkpoint's model configuration".into()));
    }
    Ok(())
}

fn save_model_dir(dir: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(&dir.join(MODEL_FILE))?;
    vocab.save(&dir.join(VOCAB_FILE))
}

fn caption_pairs(files: &DatasetFiles) -> Vec<(&ImageTensor, &str)> {
    files
        .images
        .images
        .iter()
        .map(|(id, img)| (img, files.images.captions.get(id).map(|s| s.as_str()).unwrap_or("")))
        .collect()
}

fn dataset_for_model(data: &Path, vocab: &Vocabulary) -> Result<DatasetFiles> {
    let files = read_dataset(data)?;
    if files.vocab != *vocab {
        return Err(Error::Config(format!("{} was built with a different vocabulary", data.display())));
    }
    Ok(files)
}

fn losses_text(losses: &[f64]) -> String {
    losses.iter().enumerate().map(|(i, l)| format!("{i}\t{l}\n")).collect()
}

fn run(cmd: Cmd) -> Result<()> {
    let cfg = resolve_config(&cmd)?;
    let seed = cfg.seed()?;
    match &cmd {
        Cmd::SynthCorpus { out, .. } => {
            let corpus = generate_synthetic_corpus(&cfg.corpus()?, seed)?;
            write_corpus(out, &corpus)?;
            record_config(&cfg, out, true)?;
            println!("{} source records, {} images -> {}", corpus.records.len(), corpus.images.images.len(), out.display());
        }
        Cmd::BuildData { corpus, held_out, out, .. } => {
            let corpus = match corpus {
                Some(dir) => read_corpus(dir)?,
                None => generate_synthetic_corpus(&cfg.corpus()?, seed)?,
            };
            let model_cfg = cfg.model()?;
            let vocab = corpus_vocab(&corpus, model_cfg.n_img, cfg.parse("data.max_vocab")?)?;
            let ds = build_mixture(&corpus.records, &cfg.mixture()?, &vocab, model_cfg.n_img)?;
            let manifest = write_dataset(out, &ds, &vocab, &corpus.images, *held_out)?;
            record_config(&cfg, out, true)?;
            println!("{} records {:?} -> {}", manifest.total, manifest.counts, out.display());
        }
        Cmd::PretrainClip { data, out, .. } => {
            let files = read_dataset(data)?;
            let model_cfg = ModelConfig { vocab_size: files.vocab.len(), ..cfg.model()? };
            if let Some(img) = files.images.images.values().find(|i| i.height != model_cfg.image_size) {
                return Err(Error::Config(format!(
                    "dataset images are {}px but corpus.canvas is {}",
                    img.height, model_cfg.image_size
                )));
            }
            let mut model = Model::init(model_cfg, seed)?;
            let losses = pretrain_clip(&mut model, &caption_pairs(&files), &files.vocab, &cfg.clip()?)?;
            save_model_dir(out, &model, &files.vocab)?;
            write_text(&out.join("clip_losses.tsv"), &losses_text(&losses))?;
            record_config(&cfg, out, true)?;
            println!("final contrastive loss {:.4} -> {}", losses.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Cmd::PretrainDiffusion { data, model, out, .. } => {
            let (mut m, vocab) = load_model_dir(model)?;
            check_shape(&m, &cfg)?;
            let files = dataset_for_model(data, &vocab)?;
            let report = pretrain_diffusion(&mut m, &caption_pairs(&files), &vocab, &cfg.diffusion()?)?;
            save_model_dir(out, &m, &vocab)?;
            write_text(&out.join("vae_losses.tsv"), &losses_text(&report.vae_losses))?;
            write_text(&out.join("unet_losses.tsv"), &losses_text(&report.unet_losses))?;
            record_config(&cfg, out, true)?;
            println!("latent scale {:.4}, final denoising loss {:.4} -> {}", report.latent_scale,
                report.unet_losses.last().copied().unwrap_or(f64::NAN), out.display());
        }
        Cmd::Train { data, model, resume, out, .. } => {
            let (mut m, vocab) = load_model_dir(model)?;
            let n_img = cfg.model()?.n_img;
            if m.config.n_img != n_img {
                return Err(Error::Config(format!("the checkpoint uses N = {}, the config N = {n_img}", m.config.n_img)));
            }
            check_shape(&m, &cfg)?;
            let files = dataset_for_model(data, &vocab)?;
            let td = TrainData { records: &files.records, images: &files.images, vocab_len: vocab.len() };
            let log = run_training(&mut m, &td, &cfg.train()?, Some(out), *resume)?;
            vocab.save(&out.join(VOCAB_FILE))?;
            record_config(&cfg, out, true)?;
            if let Some(r) = log.last() {
                println!("step {} loss {:.4} (lm {:.4}, diffusion {:.4}) -> {}", r.step, r.loss, r.lm_loss, r.diff_loss, out.display());
            }
        }
        Cmd::Generate { model, prompt, out, .. } => {
            let (m, vocab) = load_model_dir(model)?;
            let img = generate_image(&m, &vocab, prompt, &cfg.sampler()?)?;
            write_image(&img, out)?;
            record_config(&cfg, out, false)?;
            println!("{}", out.display());
        }
        Cmd::Edit { model, image, instruction, out, .. } => {
            let (m, vocab) = load_model_dir(model)?;
            let src = ImageTensor::load_ppm(image)?;
            let img = edit_image(&m, &vocab, &src, instruction, &cfg.sampler()?)?;
            write_image(&img, out)?;
            record_config(&cfg, out, false)?;
            println!("{}", out.display());
        }
        Cmd::Ask { model, prompt, image, out, .. } => {
            let (m, vocab) = load_model_dir(model)?;
            let img = image.as_deref().map(ImageTensor::load_ppm).transpose()?;
            let r = respond(&m, &vocab, prompt, img.as_ref(), &cfg.sampler()?, &cfg.decode()?)?;
            println!("{}", r.text);
            if let Some(img) = &r.image {
                write_image(img, out)?;
                record_config(&cfg, out, false)?;
                println!("image -> {}", out.display());
            }
        }
        Cmd::Evaluate { model, data, out, .. } => {
            let (m, vocab) = load_model_dir(model)?;
            let set = match data {
                Some(d) => EvalSet::from_dataset(&read_dataset(d)?)?,
                None => EvalSet::synthetic(&cfg.corpus()?, seed, cfg.eval_counts()?)?,
            };
            let report = evaluate(&m, &vocab, &set, &cfg.metrics()?, &cfg.eval()?, Some(out))?;
            record_config(&cfg, out, true)?;
            print!("{}", report.summary_table());
        }
        Cmd::GradCheck { model, data, out, .. } => {
            let (m, vocab) = load_model_dir(model)?;
            let files = dataset_for_model(data, &vocab)?;
            let bs: usize = cfg.parse("gradcheck.batch_size")?;
            let batch: Vec<_> = pick_mixed_batch(&files, bs);
            let cache = FeatureCache::build(&m, &files.records, &files.images)?;
            let selectors = ["projector", "lm", "gen_head", DIFFUSION_PATH];
            let report = grad_check(&m, &selectors, &batch, &cache, cfg.parse("gradcheck.per_component")?, seed)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            write_text(&out.join("gradcheck.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            record_config(&cfg, out, true)?;
            print!("{report}");
            if !report.passed() {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
    }
    Ok(())
}

/// First records of each task, round-robin, so every loss term is exercised.
fn pick_mixed_batch(files: &DatasetFiles, n: usize) -> Vec<&genvit_core::data::InstructionRecord> {
    use genvit_core::data::Task;
    let mut by_task: Vec<Vec<&genvit_core::data::InstructionRecord>> =
        Task::ALL.iter().map(|t| files.records.iter().filter(|r| r.task == *t).collect()).collect();
    let mut out = Vec::with_capacity(n);
    let mut k = 0;
    while out.len() < n && by_task.iter().any(|v| !v.is_empty()) {
        let v = &mut by_task[k % Task::ALL.len()];
        if !v.is_empty() {
            out.push(v.remove(0));
        }
        k += 1;
    }
    out
}

fn write_image(img: &ImageTensor, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_ppm(out)
}

fn config_keys_help() -> String {
    let mut s = String::from("Config keys (file < GENVIT_<KEY> env, dots as `__` < flags) and defaults:\n");
    for (k, v) in default_entries() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let keys = config_keys_help();
    let command = Cli::command().mut_subcommands(|sc| sc.after_long_help(keys.clone()));
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
