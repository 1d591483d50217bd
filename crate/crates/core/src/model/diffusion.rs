//! Noise schedule, forward noising, noise-prediction loss and the guided ancestral sampler.

use genvit_autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::ModelConfig;
use super::nn;
use super::unet::unet_predict;
use super::vae::vae_decode;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{self, Rng};

pub const NULL_COND: &str = "null_cond/emb";

/// Largest magnitude allowed for the sampler's x0 estimate.
const X0_CLIP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// `betas[t-1]` is β_t for t in 1..=T.
    pub betas: Vec<f64>,
    /// `alphas_bar[t]` for t in 0..=T with `alphas_bar[0] = 1`.
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alphas_bar = Vec::with_capacity(steps + 1);
        alphas_bar.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alphas_bar.push(acc);
        }
        Self { betas, alphas_bar }
    }

    pub fn from_config(c: &ModelConfig) -> Self {
        Self::linear(c.diffusion_steps, c.beta_start, c.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alphas_bar[t]
    }
}

/// `z_t = sqrt(ᾱ_t) o + sqrt(1 - ᾱ_t) eps` for `0 <= t <= T`.
pub fn add_noise(o: &Tensor<f32>, t: usize, eps: &Tensor<f32>, s: &NoiseSchedule) -> Result<Tensor<f32>> {
    if t > s.steps() {
        return Err(Error::Input(format!("timestep {t} outside 0..={}", s.steps())));
    }
    if o.shape() != eps.shape() {
        return Err(Error::Input(format!("latent shape {:?} does not match noise shape {:?}", o.shape(), eps.shape())));
    }
    let ab = s.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = o.data().iter().zip(eps.data()).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect();
    Ok(Tensor::new(o.shape(), data))
}

/// Per-example random draws for one diffusion-loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDraws {
    pub t: Vec<usize>,
    pub eps: Vec<Tensor<f32>>,
    pub drop: Vec<bool>,
}

impl DiffusionDraws {
    pub fn sample(rng: &mut Rng, n: usize, latent_shape: &[usize], steps: usize, p_drop: f64) -> Self {
        let mut t = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        let mut drop = Vec::with_capacity(n);
        for _ in 0..n {
            t.push(rng.random_range(1..=steps));
            eps.push(standard_normal(rng, latent_shape));
            drop.push(p_drop > 0.0 && rng.random::<f64>() < p_drop);
        }
        Self { t, eps, drop }
    }
}

pub fn standard_normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
}

/// Replaces the rows of dropped examples with the learned null condition.
pub fn apply_cond_dropout<S: Scalar>(g: &mut Graph<'_, S>, cond: Var, drop: &[bool]) -> Result<Var> {
    if !drop.iter().any(|&d| d) {
        return Ok(cond);
    }
    if !g.has_param(NULL_COND) {
        return Err(Error::ModelState("condition dropout needs the null condition embedding".into()));
    }
    let b = drop.len();
    let keep: Vec<S> = drop.iter().map(|&d| if d { S::zero() } else { S::one() }).collect();
    let dropm: Vec<S> = drop.iter().map(|&d| if d { S::one() } else { S::zero() }).collect();
    let keep = g.constant(Tensor::new(&[b, 1, 1], keep));
    let dropm = g.constant(Tensor::new(&[b, 1, 1], dropm));
    let null = g.param(NULL_COND);
    let kept = g.mul(cond, keep);
    let nulls = g.mul(dropm, null);
    Ok(g.add(kept, nulls))
}

/// Mean squared noise-prediction error over every latent entry of the batch.
pub fn diffusion_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    latents: &[&Tensor<f32>],
    cond: Var,
    draws: &DiffusionDraws,
    schedule: &NoiseSchedule,
    c: &ModelConfig,
) -> Result<Var> {
    if latents.is_empty() {
        return Err(Error::Input("diffusion loss over an empty batch".into()));
    }
    let b = latents.len();
    if draws.t.len() != b || g.shape(cond)[0] != b {
        return Err(Error::Input("diffusion batch, draws and conditions disagree in size".into()));
    }
    let mut zs = Vec::with_capacity(b);
    for (i, o) in latents.iter().enumerate() {
        zs.push(add_noise(o, draws.t[i], &draws.eps[i], schedule)?);
    }
    let side = c.latent_side();
    let shape = [b, side, side, c.latent_channels];
    let z = nn::stack(&zs.iter().collect::<Vec<_>>()).reshape(&shape);
    let eps = nn::stack(&draws.eps.iter().collect::<Vec<_>>()).reshape(&shape);
    let z = g.constant(z.cast());
    let eps = g.constant(eps.cast());
    let cond = apply_cond_dropout(g, cond, &draws.drop)?;
    let pred = unet_predict(g, z, &draws.t, cond, c);
    let diff = g.sub(pred, eps);
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Which branches of the denoiser feed each sampler step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Guidance {
    /// `(1 - w) eps_null + w eps_cond`, equal to `eps_null + w (eps_cond - eps_null)`.
    Cfg(f64),
    CondOnly,
    UncondOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub sample_steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { guidance_scale: 3.0, sample_steps: 50, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance_scale must be >= 0, got {}", self.guidance_scale)));
        }
        if self.sample_steps == 0 || self.sample_steps > schedule.steps() {
            return Err(Error::Config(format!(
                "sample_steps must be in 1..={}, got {}",
                schedule.steps(),
                self.sample_steps
            )));
        }
        Ok(())
    }
}

/// Evenly strided timesteps from T down to 1.
pub fn sample_timesteps(steps: usize, total: usize) -> Vec<usize> {
    let mut ts: Vec<usize> = if steps <= 1 {
        vec![total]
    } else {
        (0..steps).map(|i| 1 + ((i * (total - 1)) as f64 / (steps - 1) as f64).round() as usize).collect()
    };
    ts.dedup();
    ts.reverse();
    ts
}

fn predict_eps(params: &ParamStore<f32>, z: &Tensor<f32>, t: usize, cond: &Tensor<f32>, c: &ModelConfig) -> Tensor<f32> {
    let b = z.shape()[0];
    let mut g = Graph::new(params).no_grad();
    let zv = g.constant(z.clone());
    let cv = g.constant(cond.clone());
    let e = unet_predict(&mut g, zv, &vec![t; b], cv, c);
    g.value(e).clone()
}

/// Guided ancestral sampling of `B` latents from conditions `[B, L, d_u]`.
/// Sample `i` draws its noise from `stream(seed, "sample", first_index + i)`.
pub fn sample_latents(
    params: &ParamStore<f32>,
    cond: &Tensor<f32>,
    guidance: Guidance,
    cfg: &SamplerConfig,
    first_index: u64,
    c: &ModelConfig,
) -> Result<Vec<Tensor<f32>>> {
    let schedule = NoiseSchedule::from_config(c);
    cfg.validate(&schedule)?;
    let b = cond.shape()[0];
    if cond.shape() != [b, c.n_queries, c.d_u] {
        return Err(Error::Input(format!("condition shape {:?} is not [B, {}, {}]", cond.shape(), c.n_queries, c.d_u)));
    }
    let needs_null = !matches!(guidance, Guidance::CondOnly);
    let null = if needs_null {
        let n = params
            .get(NULL_COND)
            .ok_or_else(|| Error::ModelState("the null condition embedding is missing; pretrain the decoder first".into()))?;
        let refs = vec![n; b];
        Some(nn::stack(&refs))
    } else {
        None
    };

    let side = c.latent_side();
    let per = side * side * c.latent_channels;
    let shape = [b, side, side, c.latent_channels];
    let mut rngs: Vec<Rng> = (0..b).map(|i| rng::stream(cfg.seed, "sample", first_index + i as u64)).collect();
    let mut z = Vec::with_capacity(b * per);
    for r in rngs.iter_mut() {
        z.extend_from_slice(standard_normal(r, &[per]).data());
    }
    let mut z = Tensor::new(&shape, z);

    let ts = sample_timesteps(cfg.sample_steps, schedule.steps());
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = match guidance {
            Guidance::CondOnly => predict_eps(params, &z, t, cond, c),
            Guidance::UncondOnly => predict_eps(params, &z, t, null.as_ref().unwrap(), c),
            Guidance::Cfg(w) => {
                let e_c = predict_eps(params, &z, t, cond, c);
                let e_u = predict_eps(params, &z, t, null.as_ref().unwrap(), c);
                let (wf, uf) = (w as f32, (1.0 - w) as f32);
                let data = e_u.data().iter().zip(e_c.data()).map(|(&u, &cc)| uf * u + wf * cc).collect();
                Tensor::new(&shape, data)
            }
        };
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let beta = 1.0 - ab / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = var.max(0.0).sqrt();
        let zd = z.data_mut();
        for i in 0..b {
            for j in 0..per {
                let idx = i * per + j;
                let zt = zd[idx] as f64;
                let x0 = ((zt - (1.0 - ab).sqrt() * eps.data()[idx] as f64) / ab.sqrt()).clamp(-X0_CLIP, X0_CLIP);
                let mut next = c0 * x0 + ct * zt;
                if t_prev > 0 {
                    let n: f64 = rngs[i].sample(StandardNormal);
                    next += sigma * n;
                }
                zd[idx] = next as f32;
            }
        }
    }
    Ok((0..b).map(|i| z.narrow(0, i, 1).reshape(&[side, side, c.latent_channels])).collect())
}

/// Samples and decodes one image per condition row-set.
pub fn cfg_sample(
    params: &ParamStore<f32>,
    cond: &Tensor<f32>,
    guidance: Guidance,
    cfg: &SamplerConfig,
    first_index: u64,
    c: &ModelConfig,
) -> Result<Vec<ImageTensor>> {
    let latents = sample_latents(params, cond, guidance, cfg, first_index, c)?;
    Ok(vae_decode(params, &latents, c))
}

