//! Patch VAE: 4x4 space-to-depth encoder to an `(s/4)x(s/4)xC` latent, mirrored decoder.

use genvit_autograd::{Graph, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::nn::Init;
use crate::error::Result;
use crate::image::ImageTensor;

pub const LATENT_SCALE: &str = "vae/latent_scale";

pub fn init_vae(init: &mut Init<'_>, c: &ModelConfig) {
    let (ch, lc) = (c.vae_channels, c.latent_channels);
    init.conv("vae/enc1", 1, 48, ch, 1.0);
    init.conv("vae/enc2", 3, ch, ch, 1.0);
    init.conv("vae/enc_out", 3, ch, 2 * lc, 0.5);
    init.conv("vae/dec1", 3, lc, ch, 1.0);
    init.conv("vae/dec2", 3, ch, ch, 1.0);
    init.conv("vae/dec_out", 1, ch, 48, 1.0);
    init.store.insert(LATENT_SCALE, Tensor::scalar(1.0), true);
}

pub fn conv<S: Scalar>(g: &mut Graph<'_, S>, x: Var, name: &str, k: usize, stride: usize) -> Var {
    let w = g.param(&format!("{name}/w"));
    let b = g.param(&format!("{name}/b"));
    let y = g.conv2d(x, w, k, stride, k / 2);
    g.add(y, b)
}

/// `[B, H, W, C]` -> `[B, H/f, W/f, f*f*C]`.
pub fn space_to_depth<S: Scalar>(g: &mut Graph<'_, S>, x: Var, f: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let x = g.reshape(x, &[b, h / f, f, w / f, f, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b, h / f, w / f, f * f * c])
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<S: Scalar>(g: &mut Graph<'_, S>, x: Var, f: usize, c: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, h, w, f, f, c]);
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5]);
    g.reshape(x, &[b, h * f, w * f, c])
}

pub fn images_nhwc<S: Scalar>(images: &[&ImageTensor]) -> Tensor<S> {
    let (h, w) = (images[0].height, images[0].width);
    let data = images.iter().flat_map(|im| im.pixels.iter().map(|&p| S::from_f32(p))).collect();
    Tensor::new(&[images.len(), h, w, 3], data)
}

/// Posterior `(mu, logvar)`, each `[B, s/4, s/4, C]`.
pub fn encode<S: Scalar>(g: &mut Graph<'_, S>, images: Var, c: &ModelConfig) -> (Var, Var) {
    let x = space_to_depth(g, images, 4);
    let x = conv(g, x, "vae/enc1", 1, 1);
    let x = g.silu(x);
    let x = conv(g, x, "vae/enc2", 3, 1);
    let x = g.silu(x);
    let x = conv(g, x, "vae/enc_out", 3, 1);
    let mu = g.narrow(x, 3, 0, c.latent_channels);
    let logvar = g.narrow(x, 3, c.latent_channels, c.latent_channels);
    (mu, logvar)
}

/// Unscaled latent to `[B, s, s, 3]` pixels in (0, 1).
pub fn decode<S: Scalar>(g: &mut Graph<'_, S>, z: Var) -> Var {
    let x = conv(g, z, "vae/dec1", 3, 1);
    let x = g.silu(x);
    let x = conv(g, x, "vae/dec2", 3, 1);
    let x = g.silu(x);
    let x = conv(g, x, "vae/dec_out", 1, 1);
    let x = depth_to_space(g, x, 4, 3);
    g.sigmoid(x)
}

/// Reconstruction MSE plus `kl_weight` times the mean Gaussian KL.
pub fn vae_loss<S: Scalar>(g: &mut Graph<'_, S>, images: Var, eps: Tensor<S>, kl_weight: f64, c: &ModelConfig) -> (Var, Var) {
    let (mu, logvar) = encode(g, images, c);
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(std, e);
    let z = g.add(mu, noise);
    let recon = decode(g, z);
    let diff = g.sub(recon, images);
    let sq = g.square(diff);
    let mse = g.mean(sq);
    // KL(N(mu, var) || N(0, 1)) = 0.5 * (mu² + var - 1 - logvar)
    let mu2 = g.square(mu);
    let var = g.exp(logvar);
    let t = g.add(mu2, var);
    let t = g.sub(t, logvar);
    let t = g.shift(t, -1.0);
    let kl = g.mean(t);
    let kl = g.scale(kl, 0.5 * kl_weight);
    (g.add(mse, kl), mse)
}

/// Scaled posterior means for a batch of images, each `[s/4, s/4, C]`.
pub fn vae_encode(params: &genvit_autograd::ParamStore<f32>, images: &[&ImageTensor], c: &ModelConfig) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    let scale = params.get(LATENT_SCALE).map(|t| t.item()).unwrap_or(1.0);
    for chunk in images.chunks(64) {
        let mut g = Graph::new(params).no_grad();
        let x = g.constant(images_nhwc(chunk));
        let (mu, _) = encode(&mut g, x, c);
        let side = c.latent_side();
        for i in 0..chunk.len() {
            let t = g.value(mu).narrow(0, i, 1).reshape(&[side, side, c.latent_channels]);
            out.push(t.map(|v| v * scale));
        }
    }
    Ok(out)
}

/// Decodes scaled latents `[s/4, s/4, C]` to images clamped to `[0,1]`.
pub fn vae_decode(params: &genvit_autograd::ParamStore<f32>, latents: &[Tensor<f32>], c: &ModelConfig) -> Vec<ImageTensor> {
    let scale = params.get(LATENT_SCALE).map(|t| t.item()).unwrap_or(1.0);
    let side = c.latent_side();
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(64) {
        let mut g = Graph::new(params).no_grad();
        let refs: Vec<&Tensor<f32>> = chunk.iter().collect();
        let z = super::nn::stack(&refs).map(|v| v / scale);
        let z = g.constant(z.reshape(&[chunk.len(), side, side, c.latent_channels]));
        let x = decode(&mut g, z);
        let px = g.value(x);
        let per = c.image_size * c.image_size * 3;
        for i in 0..chunk.len() {
            out.push(ImageTensor::from_clamped(c.image_size, c.image_size, &px.data()[i * per..(i + 1) * per]));
        }
    }
    out
}
