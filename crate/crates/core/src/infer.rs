//! Task-token routed inference: constrained decoding, image generation and editing.

use genvit_autograd::{Graph, Tensor, Var};
use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::diffusion::{cfg_sample, Guidance, SamplerConfig};
use crate::model::lm::{self, KvCache};
use crate::model::{head, vision, Model};
use crate::rng;
use crate::tokenizer::{TokenId, Vocabulary, ASSISTANT, USER};

pub const IMAGE_SLOT: &str = "<IMAGE>";

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    /// Enforces the task-token grammar on the output.
    pub constrained: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_new_tokens: 48, temperature: 0.0, top_k: 0, constrained: true, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub text: String,
    /// Generated token ids (the prompt excluded).
    pub ids: Vec<TokenId>,
    pub image: Option<ImageTensor>,
    pub route: Route,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskToken {
    T2i,
    I2t,
}

/// Splits a prompt into its leading task token and the remaining text, with
/// `<IMAGE>` placeholders removed.
pub fn parse_prompt(prompt: &str) -> Result<(TaskToken, String)> {
    let trimmed = prompt.trim_start();
    let (task, rest) = if let Some(r) = trimmed.strip_prefix("[T2I]") {
        (TaskToken::T2i, r)
    } else if let Some(r) = trimmed.strip_prefix("[I2T]") {
        (TaskToken::I2t, r)
    } else {
        return Err(Error::Routing("prompt must start with [T2I] or [I2T]".into()));
    };
    let rest: Vec<&str> = rest.split_whitespace().filter(|w| *w != IMAGE_SLOT).collect();
    Ok((task, rest.join(" ")))
}

/// `[BOS] <task> user: <text> assistant:` as ids.
pub fn prompt_ids(task: TaskToken, text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    let sp = &vocab.specials;
    let mut ids = vec![sp.bos, if task == TaskToken::T2i { sp.t2i } else { sp.i2t }];
    let body = vocab.encode(text).ids;
    let has_turns = body.contains(&vocab.id(ASSISTANT));
    if !has_turns {
        ids.push(vocab.id(USER));
    }
    ids.extend(body);
    if !has_turns {
        ids.push(vocab.id(ASSISTANT));
    }
    ids
}

/// Incremental LM state for one sequence.
struct Decoder<'m> {
    model: &'m Model,
    cache: KvCache<f32>,
    pos: usize,
    imgs_seen: usize,
}

impl<'m> Decoder<'m> {
    fn new(model: &'m Model) -> Self {
        Self { model, cache: KvCache::new(&model.config), pos: 0, imgs_seen: 0 }
    }

    /// Feeds `visual` (optional `[P, d_lm]`) then `ids`; returns the last logits row and
    /// the hidden state of every fed token.
    fn feed(&mut self, visual: Option<&Tensor<f32>>, ids: &[TokenId]) -> Result<(Vec<f32>, Vec<Tensor<f32>>)> {
        let c = &self.model.config;
        let sp = crate::tokenizer::SpecialTokens::FIXED;
        let n_vis = visual.map(|v| v.shape()[0]).unwrap_or(0);
        let t = n_vis + ids.len();
        if self.pos + t > c.context_len {
            return Err(Error::Input(format!("sequence exceeds the context of {} positions", c.context_len)));
        }
        let mut g = Graph::new(&self.model.params).no_grad();
        let mut parts: Vec<Var> = Vec::new();
        if let Some(v) = visual {
            parts.push(g.constant(v.clone()));
        }
        if !ids.is_empty() {
            let slots = lm::img_slots(ids, &sp, c.n_img, self.imgs_seen);
            parts.push(lm::embed_tokens(&mut g, ids, &slots, c));
        }
        let x = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
        let wpe = g.param("lm/wpe");
        let pos = g.narrow(wpe, 0, self.pos, t);
        let x = g.add(x, pos);
        let x = g.reshape(x, &[1, t, c.d_lm]);
        let out = lm::lm_blocks(&mut g, x, c, Some(&mut self.cache));
        self.pos += t;
        self.imgs_seen += ids.iter().filter(|&&i| i == sp.img).count();
        let logits = g.value(out.logits);
        let v = c.vocab_size;
        let last = logits.data()[(t - 1) * v..t * v].to_vec();
        let h = g.value(out.hidden);
        let hidden = (n_vis..t).map(|i| h.narrow(1, i, 1).reshape(&[c.d_lm])).collect();
        Ok((last, hidden))
    }
}

/// Projected visual prefix `[P, d_lm]` for an input image.
pub fn visual_prefix(model: &Model, image: &ImageTensor) -> Result<Tensor<f32>> {
    let c = &model.config;
    let mut g = Graph::new(&model.params).no_grad();
    let p = g.constant(vision::patchify::<f32>(&[image], c)?);
    let v = vision::vision_forward(&mut g, p, c, false);
    let proj = vision::project(&mut g, v.penultimate);
    Ok(g.value(proj).clone().reshape(&[c.n_patches(), c.d_lm]))
}

fn pick(logits: &[f32], banned: &[TokenId], dc: &DecodeConfig, rng: &mut rng::Rng) -> TokenId {
    let mut cand: Vec<(TokenId, f64)> =
        logits.iter().enumerate().filter(|(i, _)| !banned.contains(i)).map(|(i, &l)| (i, l as f64)).collect();
    if dc.temperature <= 0.0 {
        return cand.iter().fold(cand[0], |best, &x| if x.1 > best.1 { x } else { best }).0;
    }
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if dc.top_k > 0 {
        cand.truncate(dc.top_k);
    }
    let m = cand[0].1;
    let w: Vec<f64> = cand.iter().map(|(_, l)| ((l - m) / dc.temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return cand[i].0;
        }
    }
    cand.last().unwrap().0
}

/// Result of decoding before any image is sampled.
pub struct Decoded {
    pub task: TaskToken,
    pub ids: Vec<TokenId>,
    /// `[1, N, d_lm]` hidden states of the generated [IMG] tokens, when a full block was produced.
    pub img_hidden: Option<Tensor<f32>>,
}

/// Autoregressive decoding under the task-token grammar.
pub fn decode(model: &Model, vocab: &Vocabulary, prompt: &str, image: Option<&ImageTensor>, dc: &DecodeConfig) -> Result<Decoded> {
    let (task, text) = parse_prompt(prompt)?;
    let c = &model.config;
    let sp = vocab.specials;
    let n = c.n_img;
    let ids = prompt_ids(task, &text, vocab);
    let visual = image.map(|im| visual_prefix(model, im)).transpose()?;
    let mut dec = Decoder::new(model);
    let (mut logits, _) = dec.feed(visual.as_ref(), &ids)?;
    let mut rng = rng::stream(dc.seed, "decode", 0);

    let mut out: Vec<TokenId> = Vec::new();
    let mut img_hidden: Vec<Tensor<f32>> = Vec::new();
    let mut forced: Vec<TokenId> = Vec::new();
    let mut block_done = false;
    let mut in_block = false;
    let budget = dc.max_new_tokens.min(c.context_len.saturating_sub(dec.pos));
    while out.len() < budget {
        let remaining = budget - out.len();
        let tok = if let Some(t) = forced.pop() {
            t
        } else if dc.constrained {
            let mut banned = vec![sp.bos, sp.pad, sp.t2i, sp.i2t, sp.unk, sp.img, sp.eoi];
            match task {
                TaskToken::I2t => banned.push(sp.soi),
                TaskToken::T2i if block_done => banned.push(sp.soi),
                TaskToken::T2i => banned.push(sp.eos),
            }
            if task == TaskToken::T2i && !block_done && remaining <= n + 2 {
                sp.soi
            } else {
                pick(&logits, &banned, dc, &mut rng)
            }
        } else {
            pick(&logits, &[], dc, &mut rng)
        };
        if dc.constrained && tok == sp.soi {
            forced = std::iter::once(sp.eoi).chain(std::iter::repeat_n(sp.img, n)).collect();
        }
        if tok == sp.soi {
            in_block = true;
            img_hidden.clear();
        }
        out.push(tok);
        if tok == sp.eos {
            break;
        }
        let (l, h) = dec.feed(None, &[tok])?;
        logits = l;
        if in_block && tok == sp.img {
            img_hidden.push(h[0].clone());
        }
        if tok == sp.eoi && in_block {
            in_block = false;
            if img_hidden.len() == n && !block_done {
                block_done = true;
            } else {
                img_hidden.clear();
            }
        }
        if dec.pos >= c.context_len {
            break;
        }
    }
    let img_hidden = if block_done && task == TaskToken::T2i {
        let refs: Vec<&Tensor<f32>> = img_hidden.iter().collect();
        Some(crate::model::nn::stack(&refs).reshape(&[1, n, c.d_lm]))
    } else {
        None
    };
    Ok(Decoded { task, ids: out, img_hidden })
}

/// Conditioning rows `[B, L, d_u]` from `[B, N, d_lm]` [IMG] hidden states.
pub fn latent_set(model: &Model, img_hidden: &Tensor<f32>) -> Tensor<f32> {
    let c = &model.config;
    let sp = crate::tokenizer::SpecialTokens::FIXED;
    let mut g = Graph::new(&model.params).no_grad();
    let h = g.constant(img_hidden.clone());
    let e = lm::img_embeddings(&mut g, &sp, c);
    let x = g.add(h, e);
    let u = head::head_forward(&mut g, x, c);
    g.value(u).clone()
}

/// Well-formed `[SOI] [IMG]×N [EOI]` block count in `ids`.
pub fn count_blocks(ids: &[TokenId], vocab: &Vocabulary, n: usize) -> usize {
    let sp = vocab.specials;
    let mut count = 0;
    let mut i = 0;
    while i < ids.len() {
        if ids[i] == sp.soi
            && i + n + 1 < ids.len()
            && ids[i + 1..=i + n].iter().all(|&t| t == sp.img)
            && ids[i + n + 1] == sp.eoi
        {
            count += 1;
            i += n + 2;
        } else {
            i += 1;
        }
    }
    count
}

pub fn respond(
    model: &Model,
    vocab: &Vocabulary,
    prompt: &str,
    image: Option<&ImageTensor>,
    sampler: &SamplerConfig,
    dc: &DecodeConfig,
) -> Result<Response> {
    let d = decode(model, vocab, prompt, image, dc)?;
    let text = vocab.decode_ids(&d.ids)?;
    let image = match &d.img_hidden {
        Some(h) => {
            let u = latent_set(model, h);
            let guidance = Guidance::Cfg(sampler.guidance_scale);
            Some(cfg_sample(&model.params, &u, guidance, sampler, 0, &model.config)?.remove(0))
        }
        None => None,
    };
    let route = if image.is_some() { Route::Image } else { Route::Text };
    Ok(Response { text, ids: d.ids, image, route })
}

pub fn generation_prompt(caption: &str) -> String {
    format!("[T2I] Please generate an image of {caption}")
}

pub fn generate_image(model: &Model, vocab: &Vocabulary, caption: &str, sampler: &SamplerConfig) -> Result<ImageTensor> {
    let r = respond(model, vocab, &generation_prompt(caption), None, sampler, &DecodeConfig::default())?;
    r.image.ok_or_else(|| Error::Routing("generation produced no image block".into()))
}

pub fn edit_image(
    model: &Model,
    vocab: &Vocabulary,
    image: &ImageTensor,
    instruction: &str,
    sampler: &SamplerConfig,
) -> Result<ImageTensor> {
    let prompt = format!("[T2I] {IMAGE_SLOT} {instruction}");
    let r = respond(model, vocab, &prompt, Some(image), sampler, &DecodeConfig::default())?;
    r.image.ok_or_else(|| Error::Routing("editing produced no image block".into()))
}

/// Conditioning rows for many prompts, decoded one by one and stacked `[B, L, d_u]`.
pub fn latent_sets(
    model: &Model,
    vocab: &Vocabulary,
    prompts: &[(String, Option<&ImageTensor>)],
    dc: &DecodeConfig,
) -> Result<Tensor<f32>> {
    let mut rows = Vec::with_capacity(prompts.len());
    for (p, img) in prompts {
        let d = decode(model, vocab, p, *img, dc)?;
        let h = d.img_hidden.ok_or_else(|| Error::Routing(format!("no image block for prompt `{p}`")))?;
        rows.push(latent_set(model, &h));
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    let c = &model.config;
    Ok(crate::model::nn::stack(&refs).reshape(&[prompts.len(), c.n_queries, c.d_u]))
}
