//! Patch transformer image encoder and the projector into the LM width.

use genvit_autograd::{Graph, Mask, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::nn::{self, Init};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn init_vision(init: &mut Init<'_>, c: &ModelConfig) {
    let gain = 1.0 / (2.0 * c.vis_layers as f64).sqrt();
    init.linear("vision/patch_embed", c.patch_dim(), c.d_vis);
    init.normal("vision/pos", &[c.n_patches(), c.d_vis], 0.1);
    for i in 0..c.vis_layers {
        init.encoder_block(&format!("vision/blocks.{i}"), c.d_vis, gain);
    }
    init.layer_norm("vision/ln_f", c.d_vis);
    init.linear("clip/img_proj", c.d_vis, c.clip_dim);
}

pub fn init_projector(init: &mut Init<'_>, c: &ModelConfig) {
    init.linear("projector/fc1", c.d_vis, c.d_lm);
    init.linear("projector/fc2", c.d_lm, c.d_lm);
}

/// Images as `[B, P, patch*patch*3]` rows, patches in raster order.
pub fn patchify<S: Scalar>(images: &[&ImageTensor], c: &ModelConfig) -> Result<Tensor<S>> {
    let (p, side) = (c.patch, c.image_size / c.patch);
    let mut data = Vec::with_capacity(images.len() * c.n_patches() * c.patch_dim());
    for img in images {
        if img.height != c.image_size || img.width != c.image_size {
            return Err(Error::Input(format!(
                "image is {}x{}, model expects {}x{}",
                img.height, img.width, c.image_size, c.image_size
            )));
        }
        for py in 0..side {
            for px in 0..side {
                for y in 0..p {
                    for x in 0..p {
                        let rgb = img.get(py * p + y, px * p + x);
                        data.extend(rgb.iter().map(|&v| S::from_f32(v)));
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[images.len(), c.n_patches(), c.patch_dim()], data))
}

pub struct VisionOut {
    /// `[B, P, d_vis]` output of the second-to-last block.
    pub penultimate: Var,
    /// `[B, d_vis]` mean of the final normalized patch states.
    pub pooled: Option<Var>,
}

/// Runs the encoder; with `full == false` it stops after the penultimate block.
pub fn vision_forward<S: Scalar>(g: &mut Graph<'_, S>, patches: Var, c: &ModelConfig, full: bool) -> VisionOut {
    let x = nn::linear(g, patches, "vision/patch_embed");
    let pos = g.param("vision/pos");
    let mut x = g.add(x, pos);
    for i in 0..c.vis_layers - 1 {
        x = nn::encoder_block(g, x, &format!("vision/blocks.{i}"), c.vis_heads, Mask::None);
    }
    let penultimate = x;
    let pooled = full.then(|| {
        let x = nn::encoder_block(g, x, &format!("vision/blocks.{}", c.vis_layers - 1), c.vis_heads, Mask::None);
        let x = nn::layer_norm(g, x, "vision/ln_f");
        g.mean_axis(x, 1)
    });
    VisionOut { penultimate, pooled }
}

pub fn clip_image_embed<S: Scalar>(g: &mut Graph<'_, S>, pooled: Var) -> Var {
    nn::linear(g, pooled, "clip/img_proj")
}

/// Two-layer GELU MLP applied per patch: `[.., d_vis] -> [.., d_lm]`.
pub fn project<S: Scalar>(g: &mut Graph<'_, S>, features: Var) -> Var {
    let h = nn::linear(g, features, "projector/fc1");
    let h = g.gelu(h);
    nn::linear(g, h, "projector/fc2")
}
