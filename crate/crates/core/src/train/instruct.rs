//! Single-stage instruction tuning of the projector, LM and generation head.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use genvit_autograd::{Graph, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::features::FeatureCache;
use super::optim::{clip_grad_norm, lr_at, AdamW, OptimConfig};
use crate::data::{ImageStore, InstructionRecord, Task};
use crate::error::{Error, Result};
use crate::model::diffusion::{diffusion_loss, DiffusionDraws, NoiseSchedule};
use crate::model::lm::{self, LmInput};
use crate::model::{head, nn, vision, Model, ModelConfig, INSTRUCT_COMPONENTS};
use crate::rng;
use crate::tokenizer::SpecialTokens;

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const STEP_KEY: &str = "train_step";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub lambda_lm: f64,
    pub lambda_diff: f64,
    /// Noise draws per target image in each step.
    pub diff_samples_per_record: usize,
    pub cond_dropout: f64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Stops before this step while keeping the `steps` schedule; 0 runs to the end.
    pub halt_at: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_size: 32,
            steps: 1000,
            seed: 0,
            lambda_lm: 1.0,
            lambda_diff: 1.0,
            diff_samples_per_record: 4,
            cond_dropout: 0.0,
            checkpoint_every: 0,
            halt_at: 0,
        }
    }
}

impl TrainConfig {
    /// Large-scale optimizer values: lr 2e-5, batch 128, warmup 0.03, weight decay 0.1, clip 1.0.
    pub fn large_scale_preset() -> Self {
        Self {
            optim: OptimConfig { learning_rate: 2e-5, ..OptimConfig::default() },
            batch_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if self.lambda_lm < 0.0 || self.lambda_diff < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.diff_samples_per_record == 0 {
            return Err(Error::Config("diff_samples_per_record must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config("cond_dropout must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub lm_loss: f64,
    pub diff_loss: f64,
    pub grad_norm: f64,
    pub per_task_lm: BTreeMap<String, f64>,
}

pub struct TrainData<'a> {
    pub records: &'a [InstructionRecord],
    pub images: &'a ImageStore,
    pub vocab_len: usize,
}

/// Graph nodes of the composite objective.
pub struct LossVars {
    pub total: Var,
    pub lm: Var,
    pub diff: Option<Var>,
    /// Mean masked cross-entropy per task present in the batch.
    pub per_task_lm: BTreeMap<String, f64>,
}

/// Records of the batch that carry a target image.
pub fn generating(batch: &[&InstructionRecord]) -> Vec<usize> {
    (0..batch.len()).filter(|&i| batch[i].task.generates() && batch[i].target_image.is_some()).collect()
}

/// Noise draws for `step`: `k` per generating record, ordered draw-major.
pub fn step_draws(batch: &[&InstructionRecord], c: &ModelConfig, cfg: &TrainConfig, step: usize) -> DiffusionDraws {
    let n = generating(batch).len() * cfg.diff_samples_per_record;
    let s = c.latent_side();
    let mut r = rng::stream(cfg.seed, "instruct/noise", step as u64);
    DiffusionDraws::sample(&mut r, n, &[s, s, c.latent_channels], c.diffusion_steps, cfg.cond_dropout)
}

/// `λ_lm · LM + λ_diff · diffusion` for one batch.
#[allow(clippy::too_many_arguments)]
pub fn instruct_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    c: &ModelConfig,
    batch: &[&InstructionRecord],
    cache: &FeatureCache,
    draws: &DiffusionDraws,
    k: usize,
    lambda_lm: f64,
    lambda_diff: f64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    let sp = SpecialTokens::FIXED;
    let with_image: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].input_image.is_some()).collect();
    let mut visual: Vec<Option<Var>> = vec![None; batch.len()];
    if !with_image.is_empty() {
        let feats = with_image
            .iter()
            .map(|&i| {
                let id = batch[i].input_image.as_deref().unwrap();
                cache.vision.get(id).ok_or_else(|| Error::Input(format!("no cached features for image {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let x = g.constant(nn::stack(&feats).cast());
        let proj = vision::project(g, x);
        for (j, &i) in with_image.iter().enumerate() {
            let row = g.narrow(proj, 0, j, 1);
            visual[i] = Some(g.reshape(row, &[c.n_patches(), c.d_lm]));
        }
    }
    let items: Vec<LmInput<'_>> =
        batch.iter().zip(&visual).map(|(r, v)| LmInput { visual: *v, ids: &r.tokens.ids }).collect();
    let (out, layout) = lm::lm_forward(g, &items, &sp, c)?;
    let ids: Vec<&[usize]> = batch.iter().map(|r| r.tokens.ids.as_slice()).collect();
    let masks: Vec<&[bool]> = batch.iter().map(|r| r.tokens.loss_mask.as_slice()).collect();
    let lm_loss = lm::lm_loss(g, &out, &layout, &ids, &masks, c.vocab_size)?;
    let per_task_lm = per_task_losses(g.value(out.logits), &layout, batch, c.vocab_size);

    let gen = generating(batch);
    let mut diff = None;
    if !gen.is_empty() {
        if draws.t.len() != gen.len() * k {
            return Err(Error::Input(format!("expected {} noise draws, got {}", gen.len() * k, draws.t.len())));
        }
        let rows: Vec<(usize, &[usize])> = gen.iter().map(|&i| (i, batch[i].tokens.img_positions.as_slice())).collect();
        let h = lm::extract_img_states(g, out.hidden, &layout, &rows, &sp, c)?;
        let u = head::head_forward(g, h, c);
        let u = if k > 1 { g.concat(&vec![u; k], 0) } else { u };
        let mut latents = Vec::with_capacity(gen.len() * k);
        for _ in 0..k {
            for &i in &gen {
                let id = batch[i].target_image.as_deref().unwrap();
                latents.push(cache.latents.get(id).ok_or_else(|| Error::Input(format!("no cached latent for image {id}")))?);
            }
        }
        let schedule = NoiseSchedule::from_config(c);
        diff = Some(diffusion_loss(g, &latents, u, draws, &schedule, c)?);
    }
    let mut total = g.scale(lm_loss, lambda_lm);
    if let Some(d) = diff {
        let d = g.scale(d, lambda_diff);
        total = g.add(total, d);
    }
    Ok(LossVars { total, lm: lm_loss, diff, per_task_lm })
}

fn per_task_losses<S: Scalar>(
    logits: &Tensor<S>,
    layout: &lm::BatchLayout,
    batch: &[&InstructionRecord],
    vocab: usize,
) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let d = logits.data();
    for (b, r) in batch.iter().enumerate() {
        let ids = &r.tokens.ids;
        for k in 0..ids.len().saturating_sub(1) {
            if !r.tokens.loss_mask[k + 1] {
                continue;
            }
            let row = &d[layout.row(b, k) * vocab..(layout.row(b, k) + 1) * vocab];
            let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            let e = acc.entry(r.task.name().to_string()).or_insert((0.0, 0));
            e.0 += lse - row[ids[k + 1]].as_f64();
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n.max(1) as f64)).collect()
}

/// Forward, backward, clip and update on one batch.
pub fn train_step(
    model: &mut Model,
    batch: &[&InstructionRecord],
    cache: &FeatureCache,
    cfg: &TrainConfig,
    step: usize,
    opt: &mut AdamW,
) -> Result<StepReport> {
    let c = model.config.clone();
    let draws = step_draws(batch, &c, cfg, step);
    let (mut grads, loss, lm_loss, diff_loss, per_task_lm) = {
        let mut g = Graph::new(&model.params);
        let lv = instruct_loss(&mut g, &c, batch, cache, &draws, cfg.diff_samples_per_record, cfg.lambda_lm, cfg.lambda_diff)?;
        let loss = g.value(lv.total).item() as f64;
        let lm_loss = g.value(lv.lm).item() as f64;
        let diff_loss = lv.diff.map(|d| g.value(d).item() as f64).unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, records: batch.iter().map(|r| r.record_id.clone()).collect() });
        }
        let grads = g.backward(lv.total);
        (g.param_grads(&grads), loss, lm_loss, diff_loss, lv.per_task_lm)
    };
    let grad_norm = clip_grad_norm(&mut grads, cfg.optim.max_grad_norm);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, records: batch.iter().map(|r| r.record_id.clone()).collect() });
    }
    let lr = lr_at(step, cfg.steps, cfg.optim.warmup_ratio, cfg.optim.learning_rate);
    opt.step(&mut model.params, &grads, lr, &cfg.optim);
    Ok(StepReport { step, lr, loss, lm_loss, diff_loss, grad_norm, per_task_lm })
}

/// Position `p` of the infinite stream of seeded epoch permutations.
pub struct EpochOrder {
    n: usize,
    seed: u64,
    label: &'static str,
    perms: BTreeMap<usize, Vec<usize>>,
}

impl EpochOrder {
    pub fn new(n: usize, seed: u64, label: &'static str) -> Self {
        Self { n, seed, label, perms: BTreeMap::new() }
    }

    pub fn get(&mut self, p: usize) -> usize {
        let epoch = p / self.n;
        let (n, seed, label) = (self.n, self.seed, self.label);
        let perm = self.perms.entry(epoch).or_insert_with(|| {
            let mut v: Vec<usize> = (0..n).collect();
            v.shuffle(&mut rng::stream(seed, label, epoch as u64));
            v
        });
        perm[p % n]
    }

    pub fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (step * size..(step + 1) * size).map(|p| self.get(p)).collect()
    }
}

fn check_data(model: &Model, data: &TrainData<'_>) -> Result<()> {
    let c = &model.config;
    if data.records.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.vocab_len != c.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary has {} entries but the model expects {}",
            data.vocab_len, c.vocab_size
        )));
    }
    for r in data.records {
        if r.task.generates() && r.tokens.img_positions.len() != c.n_img {
            return Err(Error::Config(format!(
                "record {} has {} [IMG] tokens but the model uses N={}",
                r.record_id,
                r.tokens.img_positions.len(),
                c.n_img
            )));
        }
        if r.tokens.ids.iter().any(|&t| t >= c.vocab_size) {
            return Err(Error::Schema { record_id: r.record_id.clone(), reason: "token id outside the vocabulary".into() });
        }
    }
    Ok(())
}

fn save_checkpoint(dir: &Path, model: &Model, opt: &AdamW, next_step: usize) -> Result<()> {
    let mut a = model.to_archive();
    a.config.insert(STEP_KEY.to_string(), next_step.to_string());
    a.save(&dir.join(MODEL_FILE))?;
    opt.save(&dir.join(OPTIMIZER_FILE))
}

/// Step stored in a checkpoint written by [`run_training`].
pub fn checkpoint_step(a: &genvit_autograd::Archive) -> usize {
    a.config.get(STEP_KEY).and_then(|v| v.parse().ok()).unwrap_or(0)
}

/// Runs (or resumes) instruction tuning. With `out`, writes `metrics.jsonl`,
/// `model.ckpt` and `optimizer.ckpt` there; `resume` continues from them.
pub fn run_training(
    model: &mut Model,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    out: Option<&Path>,
    resume: bool,
) -> Result<Vec<StepReport>> {
    cfg.validate()?;
    check_data(model, data)?;
    model.train_only(&INSTRUCT_COMPONENTS);
    let cache = FeatureCache::build(model, data.records, data.images)?;

    let mut opt = AdamW::new();
    let mut start = 0;
    let mut log = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let metrics = dir.join(METRICS_FILE);
        let mut kept = String::new();
        if resume {
            let a = crate::model::load_archive(&dir.join(MODEL_FILE))?;
            start = checkpoint_step(&a);
            *model = Model::from_archive(a)?;
            model.train_only(&INSTRUCT_COMPONENTS);
            opt = AdamW::load(&dir.join(OPTIMIZER_FILE))?;
            if let Ok(text) = fs::read_to_string(&metrics) {
                for line in text.lines() {
                    let r: StepReport = serde_json::from_str(line)?;
                    if r.step < start {
                        kept.push_str(line);
                        kept.push('\n');
                    }
                }
            }
        }
        fs::write(&metrics, kept).map_err(|e| Error::io(&metrics, e))?;
        log = Some(fs::OpenOptions::new().append(true).open(&metrics).map_err(|e| Error::io(&metrics, e))?);
    } else if resume {
        return Err(Error::Config("resuming needs an output directory".into()));
    }

    let mut order = EpochOrder::new(data.records.len(), cfg.seed, "instruct/epoch");
    let end = if cfg.halt_at > 0 { cfg.halt_at.min(cfg.steps) } else { cfg.steps };
    let mut reports = Vec::with_capacity(end.saturating_sub(start));
    for step in start..end {
        let idx = order.batch(step, cfg.batch_size);
        let batch: Vec<&InstructionRecord> = idx.iter().map(|&i| &data.records[i]).collect();
        let report = train_step(model, &batch, &cache, cfg, step, &mut opt)?;
        log::info!("step {} loss {:.4} lm {:.4} diff {:.4} lr {:.2e}", step, report.loss, report.lm_loss, report.diff_loss, report.lr);
        if let (Some(f), Some(dir)) = (log.as_mut(), out) {
            writeln!(f, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            let last = step + 1 == end;
            if last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) {
                save_checkpoint(dir, model, &opt, step + 1)?;
            }
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Per-task mean of the logged LM loss over a window of reports.
pub fn mean_task_loss(reports: &[StepReport], task: Task) -> Option<f64> {
    let v: Vec<f64> = reports.iter().filter_map(|r| r.per_task_lm.get(task.name()).copied()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
