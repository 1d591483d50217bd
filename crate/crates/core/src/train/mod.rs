//! Contrastive and diffusion pretraining, single-stage instruction tuning and gradient checking.

pub mod features;
pub mod gradcheck;
pub mod instruct;
pub mod optim;
pub mod pretrain;

pub use features::FeatureCache;
pub use gradcheck::{grad_check, GradCheckReport};
pub use instruct::{run_training, train_step, StepReport, TrainConfig, TrainData};
pub use optim::{AdamW, OptimConfig};
pub use pretrain::{pretrain_clip, pretrain_diffusion, ClipConfig, DiffusionPretrainConfig, DiffusionPretrainReport};
