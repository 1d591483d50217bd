//! Outputs of the frozen vision encoder and VAE, computed once per image.

use std::collections::{BTreeMap, BTreeSet};

use genvit_autograd::{Graph, Tensor};

use crate::data::{ImageStore, InstructionRecord};
use crate::error::Result;
use crate::model::{vae, vision, Model};

#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    /// Penultimate-block patch features `[P, d_vis]` per input image.
    pub vision: BTreeMap<String, Tensor<f32>>,
    /// Scaled VAE latents `[s, s, C]` per target image.
    pub latents: BTreeMap<String, Tensor<f32>>,
}

impl FeatureCache {
    pub fn build(model: &Model, records: &[InstructionRecord], images: &ImageStore) -> Result<Self> {
        let inputs: BTreeSet<&str> = records.iter().filter_map(|r| r.input_image.as_deref()).collect();
        let targets: BTreeSet<&str> = records.iter().filter_map(|r| r.target_image.as_deref()).collect();
        let mut cache = Self::default();
        let ids: Vec<&str> = inputs.into_iter().collect();
        for chunk in ids.chunks(64) {
            let imgs = chunk.iter().map(|id| images.get(id)).collect::<Result<Vec<_>>>()?;
            for (id, f) in chunk.iter().zip(vision_features(model, &imgs)?) {
                cache.vision.insert(id.to_string(), f);
            }
        }
        let ids: Vec<&str> = targets.into_iter().collect();
        let imgs = ids.iter().map(|id| images.get(id)).collect::<Result<Vec<_>>>()?;
        for (id, z) in ids.iter().zip(vae::vae_encode(&model.params, &imgs, &model.config)?) {
            cache.latents.insert(id.to_string(), z);
        }
        Ok(cache)
    }
}

/// Penultimate-block patch features for a batch of images.
pub fn vision_features(model: &Model, images: &[&crate::image::ImageTensor]) -> Result<Vec<Tensor<f32>>> {
    let c = &model.config;
    let mut g = Graph::new(&model.params).no_grad();
    let p = g.constant(vision::patchify::<f32>(images, c)?);
    let out = vision::vision_forward(&mut g, p, c, false);
    let v = g.value(out.penultimate);
    Ok((0..images.len()).map(|i| v.narrow(0, i, 1).reshape(&[c.n_patches(), c.d_vis])).collect())
}
