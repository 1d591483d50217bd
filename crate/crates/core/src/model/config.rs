use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Every architecture hyperparameter of the composite model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_vis: usize,
    pub vis_layers: usize,
    pub vis_heads: usize,

    pub vocab_size: usize,
    pub d_lm: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    /// Number of [IMG] tokens in a generation block.
    pub n_img: usize,
    pub distinct_img_embeddings: bool,

    pub head_dim: usize,
    pub head_heads: usize,
    pub head_enc_layers: usize,
    pub head_dec_layers: usize,
    /// Rows of the conditioning latent set; also the text encoder's length.
    pub n_queries: usize,
    pub d_u: usize,
    pub head_causal: bool,

    pub text_layers: usize,
    pub text_heads: usize,
    pub clip_dim: usize,
    pub clip_temperature: f64,

    pub vae_channels: usize,
    pub latent_channels: usize,
    pub unet_channels: usize,
    pub time_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            d_vis: 64,
            vis_layers: 4,
            vis_heads: 4,
            vocab_size: 512,
            d_lm: 128,
            n_layers: 4,
            n_heads: 4,
            context_len: 256,
            n_img: 16,
            distinct_img_embeddings: false,
            head_dim: 64,
            head_heads: 4,
            head_enc_layers: 4,
            head_dec_layers: 4,
            n_queries: 8,
            d_u: 64,
            head_causal: true,
            text_layers: 2,
            text_heads: 4,
            clip_dim: 64,
            clip_temperature: 0.07,
            vae_channels: 32,
            latent_channels: 4,
            unet_channels: 32,
            time_dim: 64,
            diffusion_steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

macro_rules! config_fields {
    ($mac:ident) => {
        $mac!(
            image_size, patch, d_vis, vis_layers, vis_heads, vocab_size, d_lm, n_layers, n_heads, context_len,
            n_img, distinct_img_embeddings, head_dim, head_heads, head_enc_layers, head_dec_layers, n_queries,
            d_u, head_causal, text_layers, text_heads, clip_dim, clip_temperature, vae_channels,
            latent_channels, unet_channels, time_dim, diffusion_steps, beta_start, beta_end
        )
    };
}

impl ModelConfig {
    /// Small widths for fast tests.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch: 8,
            d_vis: 16,
            vis_layers: 2,
            vis_heads: 2,
            vocab_size: 64,
            d_lm: 16,
            n_layers: 2,
            n_heads: 2,
            context_len: 48,
            n_img: 4,
            head_dim: 16,
            head_heads: 2,
            head_enc_layers: 1,
            head_dec_layers: 1,
            n_queries: 4,
            d_u: 8,
            text_layers: 1,
            text_heads: 2,
            clip_dim: 8,
            vae_channels: 8,
            latent_channels: 2,
            unet_channels: 8,
            time_dim: 8,
            diffusion_steps: 20,
            ..Self::default()
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Spatial side of the latent grid (the VAE downsamples by 4).
    pub fn latent_side(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad("image_size must be a multiple of patch");
        }
        if !self.image_size.is_multiple_of(8) {
            return bad("image_size must be a multiple of 8");
        }
        if self.vis_layers < 2 {
            return bad("the vision encoder needs at least two blocks");
        }
        if !self.d_lm.is_multiple_of(self.n_heads) || !self.d_vis.is_multiple_of(self.vis_heads) {
            return bad("model widths must be divisible by their head counts");
        }
        if !self.head_dim.is_multiple_of(self.head_heads) || !self.d_u.is_multiple_of(self.text_heads) {
            return bad("head widths must be divisible by their head counts");
        }
        if self.n_img == 0 || self.n_queries == 0 {
            return bad("n_img and n_queries must be positive");
        }
        if self.vocab_size < 9 {
            return bad("vocab_size must cover the reserved tokens");
        }
        if !(self.beta_start > 0.0 && self.beta_end < 1.0 && self.beta_start <= self.beta_end) {
            return bad("betas must satisfy 0 < beta_start <= beta_end < 1");
        }
        if self.diffusion_steps == 0 {
            return bad("diffusion_steps must be positive");
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        macro_rules! put {
            ($($f:ident),*) => { $( m.insert(stringify!($f).to_string(), self.$f.to_string()); )* };
        }
        config_fields!(put);
        m
    }

    /// Reads known keys from `m`; keys that are absent keep their defaults.
    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        macro_rules! get {
            ($($f:ident),*) => { $(
                if let Some(v) = m.get(stringify!($f)) {
                    c.$f = v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {}", stringify!($f))))?;
                }
            )* };
        }
        config_fields!(get);
        c.validate()?;
        Ok(c)
    }

    pub fn is_key(key: &str) -> bool {
        let mut found = false;
        macro_rules! check {
            ($($f:ident),*) => { $( found |= key == stringify!($f); )* };
        }
        config_fields!(check);
        found
    }
}
