//! Pretraining of the frozen components: contrastive image/caption encoders,
//! then the VAE and the caption-conditioned UNet.

use std::collections::BTreeMap;

use genvit_autograd::{Graph, Tensor};

use super::instruct::EpochOrder;
use super::optim::{clip_grad_norm, lr_at, AdamW, OptimConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::diffusion::{self, diffusion_loss, DiffusionDraws, NoiseSchedule};
use crate::model::{nn, text, vae, vision, Model, CLIP_COMPONENTS, UNET_COMPONENTS, VAE_COMPONENTS};
use crate::rng;
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct ClipConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { optim: OptimConfig::default(), batch_size: 64, steps: 600, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPretrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub vae_steps: usize,
    pub unet_steps: usize,
    pub seed: u64,
    pub cond_dropout: f64,
    pub kl_weight: f64,
}

impl Default for DiffusionPretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig { learning_rate: 2e-3, ..OptimConfig::default() },
            batch_size: 32,
            vae_steps: 600,
            unet_steps: 2000,
            seed: 0,
            cond_dropout: 0.1,
            kl_weight: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiffusionPretrainReport {
    pub vae_losses: Vec<f64>,
    pub unet_losses: Vec<f64>,
    pub latent_scale: f32,
}

fn update(model: &mut Model, mut grads: BTreeMap<String, Tensor<f32>>, opt: &mut AdamW, cfg: &OptimConfig, step: usize, total: usize) {
    clip_grad_norm(&mut grads, cfg.max_grad_norm);
    let lr = lr_at(step, total, cfg.warmup_ratio, cfg.learning_rate);
    opt.step(&mut model.params, &grads, lr, cfg);
}

fn finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFiniteLoss { step, records: Vec::new() })
    }
}

/// Symmetric contrastive training of the vision and caption encoders; both are frozen afterwards.
pub fn pretrain_clip(model: &mut Model, pairs: &[(&ImageTensor, &str)], vocab: &Vocabulary, cfg: &ClipConfig) -> Result<Vec<f64>> {
    cfg.optim.validate()?;
    if cfg.batch_size < 2 {
        return Err(Error::Config("the contrastive objective needs a batch of at least 2".into()));
    }
    if pairs.len() < 2 {
        return Err(Error::Input("contrastive pretraining needs at least 2 pairs".into()));
    }
    let c = model.config.clone();
    model.train_only(&CLIP_COMPONENTS);
    let ids: Vec<Vec<TokenId>> = pairs.iter().map(|(_, cap)| text::caption_ids(cap, vocab, c.n_queries)).collect();
    let mut order = EpochOrder::new(pairs.len(), cfg.seed, "clip/epoch");
    let mut opt = AdamW::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx = order.batch(step, cfg.batch_size.min(pairs.len()));
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| pairs[i].0).collect();
        let caps: Vec<Vec<TokenId>> = idx.iter().map(|&i| ids[i].clone()).collect();
        let (loss, grads) = {
            let mut g = Graph::new(&model.params);
            let loss = clip_batch_loss(&mut g, &imgs, &caps, vocab.specials.pad, &c)?;
            let l = g.value(loss).item() as f64;
            let gr = g.backward(loss);
            (l, g.param_grads(&gr))
        };
        losses.push(finite(loss, step)?);
        if step % 50 == 0 {
            log::info!("clip step {step} loss {loss:.4}");
        }
        update(model, grads, &mut opt, &cfg.optim, step, cfg.steps);
    }
    model.train_only(&[]);
    Ok(losses)
}

pub fn clip_batch_loss<S: genvit_autograd::Scalar>(
    g: &mut Graph<'_, S>,
    imgs: &[&ImageTensor],
    caps: &[Vec<TokenId>],
    pad: TokenId,
    c: &crate::model::ModelConfig,
) -> Result<genvit_autograd::Var> {
    let p = g.constant(vision::patchify::<S>(imgs, c)?);
    let v = vision::vision_forward(g, p, c, true);
    let ie = vision::clip_image_embed(g, v.pooled.unwrap());
    let t = text::text_forward(g, caps, pad, c);
    let te = text::clip_text_embed(g, t.pooled);
    Ok(text::clip_loss(g, ie, te, c.clip_temperature))
}

/// Caption-encoder conditioning rows `[L, d_u]` for each caption.
pub fn caption_conditions(model: &Model, captions: &[&str], vocab: &Vocabulary) -> Result<Vec<Tensor<f32>>> {
    let c = &model.config;
    if !model.params.contains("text/wte") {
        return Err(Error::Dependency("the caption encoder is missing; run pretrain-clip first".into()));
    }
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(64) {
        let ids: Vec<Vec<TokenId>> = chunk.iter().map(|cap| text::caption_ids(cap, vocab, c.n_queries)).collect();
        let mut g = Graph::new(&model.params).no_grad();
        let t = text::text_forward(&mut g, &ids, vocab.specials.pad, c);
        let v = g.value(t.cond);
        out.extend((0..chunk.len()).map(|i| v.narrow(0, i, 1).reshape(&[c.n_queries, c.d_u])));
    }
    Ok(out)
}

/// Trains the VAE, fixes the latent scale, then trains the UNet and null condition.
pub fn pretrain_diffusion(
    model: &mut Model,
    pairs: &[(&ImageTensor, &str)],
    vocab: &Vocabulary,
    cfg: &DiffusionPretrainConfig,
) -> Result<DiffusionPretrainReport> {
    cfg.optim.validate()?;
    if pairs.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Input("diffusion pretraining needs images and a positive batch size".into()));
    }
    let captions: Vec<&str> = pairs.iter().map(|p| p.1).collect();
    let conds = caption_conditions(model, &captions, vocab)?;
    let c = model.config.clone();
    let side = c.latent_side();
    let bs = cfg.batch_size.min(pairs.len());
    let mut report = DiffusionPretrainReport::default();

    model.train_only(&VAE_COMPONENTS);
    model.params.insert(vae::LATENT_SCALE, Tensor::scalar(1.0), true);
    let mut order = EpochOrder::new(pairs.len(), cfg.seed, "vae/epoch");
    let mut opt = AdamW::new();
    for step in 0..cfg.vae_steps {
        let idx = order.batch(step, bs);
        let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| pairs[i].0).collect();
        let mut r = rng::stream(cfg.seed, "vae/noise", step as u64);
        let eps = diffusion::standard_normal(&mut r, &[bs, side, side, c.latent_channels]);
        let (loss, mse, grads) = {
            let mut g = Graph::new(&model.params);
            let x = g.constant(vae::images_nhwc(&imgs));
            let (loss, mse) = vae::vae_loss(&mut g, x, eps, cfg.kl_weight, &c);
            let (l, m) = (g.value(loss).item() as f64, g.value(mse).item() as f64);
            let gr = g.backward(loss);
            (l, m, g.param_grads(&gr))
        };
        finite(loss, step)?;
        report.vae_losses.push(mse);
        if step % 50 == 0 {
            log::info!("vae step {step} loss {loss:.5} mse {mse:.5}");
        }
        update(model, grads, &mut opt, &cfg.optim, step, cfg.vae_steps);
    }

    let sample: Vec<&ImageTensor> = pairs.iter().take(512).map(|p| p.0).collect();
    let z = vae::vae_encode(&model.params, &sample, &c)?;
    let n: usize = z.iter().map(|t| t.numel()).sum();
    let mean = z.iter().flat_map(|t| t.data()).map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = z.iter().flat_map(|t| t.data()).map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    let scale = (1.0 / var.sqrt().max(1e-6)) as f32;
    model.params.insert(vae::LATENT_SCALE, Tensor::scalar(scale), true);
    report.latent_scale = scale;

    let imgs: Vec<&ImageTensor> = pairs.iter().map(|p| p.0).collect();
    let latents = vae::vae_encode(&model.params, &imgs, &c)?;
    model.train_only(&UNET_COMPONENTS);
    let schedule = NoiseSchedule::from_config(&c);
    let mut order = EpochOrder::new(pairs.len(), cfg.seed, "unet/epoch");
    let mut opt = AdamW::new();
    for step in 0..cfg.unet_steps {
        let idx = order.batch(step, bs);
        let lat: Vec<&Tensor<f32>> = idx.iter().map(|&i| &latents[i]).collect();
        let cond: Vec<&Tensor<f32>> = idx.iter().map(|&i| &conds[i]).collect();
        let mut r = rng::stream(cfg.seed, "unet/noise", step as u64);
        let draws = DiffusionDraws::sample(&mut r, bs, &[side, side, c.latent_channels], schedule.steps(), cfg.cond_dropout);
        let (loss, grads) = {
            let mut g = Graph::new(&model.params);
            let u = g.constant(nn::stack(&cond));
            let loss = diffusion_loss(&mut g, &lat, u, &draws, &schedule, &c)?;
            let l = g.value(loss).item() as f64;
            let gr = g.backward(loss);
            (l, g.param_grads(&gr))
        };
        report.unet_losses.push(finite(loss, step)?);
        if step % 50 == 0 {
            log::info!("unet step {step} loss {loss:.4}");
        }
        update(model, grads, &mut opt, &cfg.optim, step, cfg.unet_steps);
    }
    model.train_only(&[]);
    Ok(report)
}
