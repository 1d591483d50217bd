//! Composite model: vision encoder, projector, LM, generation head, caption encoder and latent diffusion decoder.

pub mod config;
pub mod diffusion;
pub mod head;
pub mod lm;
pub mod nn;
pub mod text;
pub mod unet;
pub mod vae;
pub mod vision;

use std::path::Path;

use genvit_autograd::{Archive, ParamStore};

pub use config::ModelConfig;
pub use diffusion::{Guidance, NoiseSchedule, SamplerConfig};

use crate::error::{Error, Result};
use crate::rng;

pub const CLIP_COMPONENTS: [&str; 3] = ["vision", "text", "clip"];
pub const VAE_COMPONENTS: [&str; 1] = ["vae"];
pub const UNET_COMPONENTS: [&str; 2] = ["unet", "null_cond"];
pub const INSTRUCT_COMPONENTS: [&str; 3] = ["projector", "lm", "gen_head"];
pub const ALL_COMPONENTS: [&str; 9] =
    ["vision", "clip", "text", "projector", "lm", "gen_head", "vae", "unet", "null_cond"];

/// Reads a checkpoint archive, naming the path on io failures.
pub fn load_archive(path: &Path) -> Result<Archive> {
    Archive::load(path).map_err(|e| match e {
        genvit_autograd::ArchiveError::Io(source) => Error::io(path, source),
        other => other.into(),
    })
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Fresh parameters; every component draws from its own stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        {
            let mut run = |label: &str, f: &dyn Fn(&mut nn::Init<'_>, &ModelConfig)| {
                let mut init = nn::Init::new(&mut params, rng::stream(seed, label, 0));
                f(&mut init, &config);
            };
            run("init/vision", &vision::init_vision);
            run("init/projector", &vision::init_projector);
            run("init/lm", &lm::init_lm);
            run("init/head", &head::init_head);
            run("init/text", &text::init_text);
            run("init/vae", &vae::init_vae);
            run("init/unet", &unet::init_unet);
            run("init/null", &|i, c| i.normal(diffusion::NULL_COND, &[c.n_queries, c.d_u], 0.1));
        }
        Ok(Self { config, params })
    }

    /// Leaves only `components` trainable; the latent scale stays frozen.
    pub fn train_only(&mut self, components: &[&str]) {
        for comp in self.params.components() {
            self.params.freeze_component(&comp, !components.contains(&comp.as_str()));
        }
        if self.params.contains(vae::LATENT_SCALE) {
            self.params.set_frozen(vae::LATENT_SCALE, true);
        }
    }

    pub fn to_archive(&self) -> Archive {
        Archive::new(self.config.to_map(), self.params.clone())
    }

    pub fn from_archive(a: Archive) -> Result<Self> {
        let config = ModelConfig::from_map(&a.config)?;
        Ok(Self { config, params: a.params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path).map_err(Error::from)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(load_archive(path)?)
    }

    /// Errors unless every parameter of each listed component is present.
    pub fn require(&self, components: &[&str]) -> Result<()> {
        let have = self.params.components();
        for c in components {
            if !have.iter().any(|h| h == c) {
                return Err(Error::ModelState(format!("checkpoint has no `{c}` parameters")));
            }
        }
        Ok(())
    }
}
