//! Evaluation: feature-space metrics, prompt templates and the report writer.

pub mod metrics;
pub mod templates;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use genvit_autograd::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use metrics::{
    clip_image_embeddings, clip_pair_similarities, clip_similarity, clip_text_embeddings, cosine, dino_pair_scores, dino_proxy, fid, fid_from_stats, image_features,
    mean_cosine, mean_se, FeatureSet, FidResult, Source,
};
pub use templates::{apply_prompt_template, parse_prompt_template, TemplateFamily, TemplateSlots};

use crate::data::{self, CorpusSpec, DatasetFiles, EditTriple, Task};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::infer::{self, DecodeConfig};
use crate::model::diffusion::{cfg_sample, Guidance, SamplerConfig};
use crate::model::{Model, CLIP_COMPONENTS};
use crate::rng;
use crate::tokenizer::{Vocabulary, ASSISTANT, EOS, USER};

pub const REPORT_FILE: &str = "report.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Fid,
    ClipSimilarity,
    DinoProxy,
    VqaExactMatch,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Fid, Metric::ClipSimilarity, Metric::DinoProxy, Metric::VqaExactMatch];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Fid => "fid",
            Metric::ClipSimilarity => "clip_similarity",
            Metric::DinoProxy => "dino_proxy",
            Metric::VqaExactMatch => "vqa_exact_match",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaItem {
    pub image: ImageTensor,
    pub question: String,
    pub answer: String,
}

/// Held-out material for every evaluation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    /// (caption, reference render) pairs for text-to-image generation.
    pub generation: Vec<(String, ImageTensor)>,
    pub edits: Vec<EditTriple>,
    pub vqa: Vec<VqaItem>,
    /// Real images for the FID reference side.
    pub real: Vec<ImageTensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalCounts {
    pub captions: usize,
    pub edits: usize,
    pub vqa: usize,
    pub real: usize,
}

impl Default for EvalCounts {
    fn default() -> Self {
        Self { captions: 64, edits: 64, vqa: 64, real: 256 }
    }
}

impl EvalSet {
    /// Draws every item from held-out streams of the synthetic generator.
    pub fn synthetic(spec: &CorpusSpec, seed: u64, n: EvalCounts) -> Result<Self> {
        Ok(Self {
            generation: data::held_out_captions(spec, seed, n.captions)?,
            edits: data::held_out_edits(spec, seed, n.edits)?,
            vqa: data::held_out_vqa(spec, seed, n.vqa)?
                .into_iter()
                .map(|(image, question, answer)| VqaItem { image, question, answer })
                .collect(),
            real: data::held_out_renders(spec, seed, n.real)?,
        })
    }

    /// Reads a dataset written with the held-out flag. Edits are paired with the
    /// target of the next edit record as their unrelated render.
    pub fn from_dataset(files: &DatasetFiles) -> Result<Self> {
        if !files.manifest.held_out {
            return Err(Error::Config("evaluation needs a dataset built with the held-out flag".into()));
        }
        let mut set = EvalSet::default();
        let mut edits = Vec::new();
        for r in &files.records {
            let text = files.vocab.decode(&r.tokens)?;
            let (user, assistant) = split_turns(&text);
            let img = |id: &Option<String>| -> Result<ImageTensor> {
                let id = id.as_deref().ok_or_else(|| Error::Input(format!("record {} lacks an image", r.record_id)))?;
                Ok(files.images.get(id)?.clone())
            };
            match r.task {
                Task::T2i => {
                    let id = r.target_image.as_deref().unwrap_or_default();
                    let caption = files.images.captions.get(id).cloned().unwrap_or(user);
                    let target = img(&r.target_image)?;
                    set.real.push(target.clone());
                    set.generation.push((caption, target));
                }
                Task::Edit => {
                    let caption = files.images.captions.get(r.target_image.as_deref().unwrap_or_default()).cloned();
                    edits.push((img(&r.input_image)?, user, img(&r.target_image)?, caption.unwrap_or_default()));
                }
                Task::I2t => set.vqa.push(VqaItem { image: img(&r.input_image)?, question: user, answer: assistant }),
                Task::TextOnly => {}
            }
        }
        let n = edits.len();
        for i in 0..n {
            let unrelated = edits[(i + 1) % n].2.clone();
            let (source, instruction, target, target_caption) = edits[i].clone();
            set.edits.push(EditTriple { source, instruction, target, target_caption, unrelated });
        }
        Ok(set)
    }
}

/// Last user turn and last assistant turn of a formatted record.
fn split_turns(text: &str) -> (String, String) {
    let body = text.split_whitespace().filter(|w| !w.starts_with('[') || *w == EOS).collect::<Vec<_>>().join(" ");
    let user = body.rsplit(USER).next().unwrap_or("");
    let (u, a) = user.split_once(ASSISTANT).unwrap_or((user, ""));
    let a = a.split(EOS).next().unwrap_or("");
    (u.trim().to_string(), a.trim().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    /// Generated images per caption.
    pub samples_per_caption: usize,
    pub config_hash: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { sampler: SamplerConfig::default(), samples_per_caption: 2, config_hash: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub value: f64,
    pub n: usize,
    pub extractor: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: BTreeMap<String, MetricEntry>,
}

impl EvalReport {
    pub fn value(&self, name: &str) -> Option<f64> {
        self.entries.get(name).map(|e| e.value)
    }

    fn put(&mut self, name: &str, value: f64, n: usize, extractor: &str, hash: &str) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("metric {name} is not finite")));
        }
        let e = MetricEntry { value, n, extractor: extractor.into(), config_hash: hash.into() };
        self.entries.insert(name.into(), e);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for (name, e) in &self.entries {
            let line = serde_json::json!({
                "metric": name, "value": e.value, "n": e.n, "extractor": e.extractor, "config_hash": e.config_hash,
            });
            s.push_str(&serde_json::to_string(&line)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<28} {:>12} {:>6}  {}\n", "metric", "value", "n", "extractor");
        for (name, e) in &self.entries {
            let _ = writeln!(s, "{:<28} {:>12.6} {:>6}  {}", name, e.value, e.n, e.extractor);
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let w = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))
        };
        w(REPORT_FILE, self.to_jsonl()?)?;
        w(SUMMARY_FILE, self.summary_table())
    }
}

/// Images sampled from U stacked sample-major: image `s·B + i` is sample `s` for prompt `i`.
fn sample_repeated(model: &Model, u: &Tensor<f32>, k: usize, sampler: &SamplerConfig, first: u64) -> Result<Vec<ImageTensor>> {
    let b = u.shape()[0];
    let mut out = Vec::with_capacity(b * k);
    for s in 0..k {
        for start in (0..b).step_by(64) {
            let len = 64.min(b - start);
            let chunk = u.narrow(0, start, len);
            let idx = first + (s * b + start) as u64;
            out.extend(cfg_sample(&model.params, &chunk, Guidance::Cfg(sampler.guidance_scale), sampler, idx, &model.config)?);
        }
    }
    Ok(out)
}

pub fn uniform_noise_images(n: usize, side: usize, seed: u64) -> Vec<ImageTensor> {
    let mut r = rng::stream(seed, "eval/noise", 0);
    (0..n)
        .map(|_| {
            let px = (0..side * side * 3).map(|_| r.random::<f32>()).collect();
            ImageTensor::new(side, side, px).expect("sized")
        })
        .collect()
}

fn save_all(dir: Option<&Path>, prefix: &str, images: &[ImageTensor]) -> Result<()> {
    if let Some(d) = dir {
        let d = d.join("images");
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, img) in images.iter().enumerate() {
            img.save_ppm(&d.join(format!("{prefix}_{i:04}.ppm")))?;
        }
    }
    Ok(())
}

/// Runs the passes the requested metrics need; writes the report and every
/// generated image under `out` when given.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    set: &EvalSet,
    metrics: &[Metric],
    cfg: &EvalConfig,
    out: Option<&Path>,
) -> Result<EvalReport> {
    model.require(&CLIP_COMPONENTS)?;
    let c = &model.config;
    let hash = cfg.config_hash.as_str();
    let ext = metrics::EXTRACTOR;
    let dc = DecodeConfig { seed: cfg.sampler.seed, ..DecodeConfig::default() };
    let wants = |m: Metric| metrics.contains(&m);
    let mut report = EvalReport::default();

    if wants(Metric::Fid) || wants(Metric::ClipSimilarity) {
        if set.generation.is_empty() {
            return Err(Error::Config("generation metrics need held-out captions".into()));
        }
        if cfg.samples_per_caption == 0 {
            return Err(Error::Config("samples_per_caption must be positive".into()));
        }
        let n = set.generation.len();
        let k = cfg.samples_per_caption;
        let prompts: Vec<(String, Option<&ImageTensor>)> =
            set.generation.iter().map(|(cap, _)| (infer::generation_prompt(cap), None)).collect();
        let u = infer::latent_sets(model, vocab, &prompts, &dc)?;
        let generated = sample_repeated(model, &u, k, &cfg.sampler, 0)?;
        save_all(out, "generated", &generated)?;

        if wants(Metric::ClipSimilarity) {
            let captions: Vec<&str> = set.generation.iter().map(|(cap, _)| cap.as_str()).collect();
            let te = metrics::clip_text_embeddings(model, &captions, vocab)?;
            let refs: Vec<&ImageTensor> = generated.iter().collect();
            let ie = metrics::clip_image_embeddings(model, &refs)?;
            let shift = if n > 1 { rng::stream(cfg.sampler.seed, "eval/shuffle", 0).random_range(1..n) } else { 0 };
            let (mut matched, mut diffs) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let mut shuffled = Vec::with_capacity(n);
            for i in 0..n {
                let (mut m, mut s) = (0.0, 0.0);
                for j in 0..k {
                    m += cosine(&te[i], &ie[j * n + i])?;
                    s += cosine(&te[(i + shift) % n], &ie[j * n + i])?;
                }
                matched.push(m / k as f64);
                shuffled.push(s / k as f64);
                diffs.push((m - s) / k as f64);
            }
            let (mm, _) = mean_se(&matched);
            let (ms, _) = mean_se(&shuffled);
            let (md, se) = mean_se(&diffs);
            report.put("clip_similarity", mm, n * k, metrics::CLIP_EXTRACTOR, hash)?;
            report.put("clip_similarity_shuffled", ms, n * k, metrics::CLIP_EXTRACTOR, hash)?;
            report.put("clip_similarity_margin_se", if se > 0.0 { md / se } else { 0.0 }, n, metrics::CLIP_EXTRACTOR, hash)?;
        }
        if wants(Metric::Fid) {
            if set.real.len() < 2 {
                return Err(Error::Config("FID needs at least 2 real images".into()));
            }
            let real_refs: Vec<&ImageTensor> = set.real.iter().collect();
            let real = FeatureSet::new(&image_features(model, &real_refs)?, Source::Real, ext)?;
            let gen_refs: Vec<&ImageTensor> = generated.iter().collect();
            let gen = FeatureSet::new(&image_features(model, &gen_refs)?, Source::Generated, ext)?;
            let noise_imgs = uniform_noise_images(generated.len(), c.image_size, cfg.sampler.seed);
            let noise_refs: Vec<&ImageTensor> = noise_imgs.iter().collect();
            let noise = FeatureSet::new(&image_features(model, &noise_refs)?, Source::Generated, ext)?;
            for s in [&real, &gen] {
                if s.features.nrows() <= s.features.ncols() {
                    log::warn!("{} feature rows for d={}; FID covariance is rank-deficient", s.features.nrows(), s.features.ncols());
                }
            }
            report.put("fid", fid(&gen, &real)?.value, generated.len(), ext, hash)?;
            report.put("fid_noise", fid(&noise, &real)?.value, noise_imgs.len(), ext, hash)?;
        }
    }

    if wants(Metric::DinoProxy) {
        if set.edits.is_empty() {
            return Err(Error::Config("dino_proxy needs held-out edit triples".into()));
        }
        let prompts: Vec<(String, Option<&ImageTensor>)> = set
            .edits
            .iter()
            .map(|e| {
                let p = apply_prompt_template(TemplateFamily::Editing, None, None, Some(&e.instruction));
                p.map(|p| (p, Some(&e.source)))
            })
            .collect::<Result<_>>()?;
        let u = infer::latent_sets(model, vocab, &prompts, &dc)?;
        let first = (set.generation.len() * cfg.samples_per_caption) as u64;
        let outputs = sample_repeated(model, &u, 1, &cfg.sampler, first)?;
        save_all(out, "edited", &outputs)?;
        let outs: Vec<&ImageTensor> = outputs.iter().collect();
        let targets: Vec<&ImageTensor> = set.edits.iter().map(|e| &e.target).collect();
        let unrelated: Vec<&ImageTensor> = set.edits.iter().map(|e| &e.unrelated).collect();
        let n = outs.len();
        report.put("dino_proxy", dino_proxy(model, &outs, &targets)?, n, ext, hash)?;
        report.put("dino_proxy_unrelated", dino_proxy(model, &outs, &unrelated)?, n, ext, hash)?;
    }

    if wants(Metric::VqaExactMatch) {
        if set.vqa.is_empty() {
            return Err(Error::Config("vqa_exact_match needs held-out questions".into()));
        }
        let mut hits = 0;
        for item in &set.vqa {
            let prompt = apply_prompt_template(TemplateFamily::Advanced, Some(&item.question), None, None)?;
            let d = infer::decode(model, vocab, &prompt, Some(&item.image), &dc)?;
            let text = vocab.decode_ids(&d.ids)?;
            let answer = text.split(EOS).next().unwrap_or("").trim();
            if answer == item.answer.trim() {
                hits += 1;
            }
        }
        report.put("vqa_exact_match", hits as f64 / set.vqa.len() as f64, set.vqa.len(), "exact-match", hash)?;
    }

    if let Some(d) = out {
        report.write(d)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turns_split() {
        let t = "[BOS] [I2T] user: what shape is in the image? assistant: circle [EOS]";
        assert_eq!(split_turns(t), ("what shape is in the image?".into(), "circle".into()));
        let t = "[BOS] [T2I] user: make the circle red assistant: [SOI] [IMG] [EOI] [EOS]";
        assert_eq!(split_turns(t), ("make the circle red".into(), "".into()));
    }

    #[test]
    fn metric_names_parse() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!(matches!("bleu".parse::<Metric>(), Err(Error::Config(_))));
    }
}
