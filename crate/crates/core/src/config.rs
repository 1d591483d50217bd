//! Flat `key = value` run configuration: file < `GENVIT_` environment < flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{CorpusSpec, MixtureConfig, Shape};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, EvalCounts, Metric};
use crate::infer::DecodeConfig;
use crate::model::{ModelConfig, SamplerConfig};
use crate::pipeline::DeskConfig;
use crate::train::{ClipConfig, DiffusionPretrainConfig, OptimConfig, TrainConfig};

pub const ENV_PREFIX: &str = "GENVIT_";
pub const HASH_KEY: &str = "config_hash";

fn optim_entries(prefix: &str, o: &OptimConfig, out: &mut Vec<(String, String)>) {
    for (k, v) in [
        ("learning_rate", o.learning_rate.to_string()),
        ("warmup_ratio", o.warmup_ratio.to_string()),
        ("weight_decay", o.weight_decay.to_string()),
        ("max_grad_norm", o.max_grad_norm.to_string()),
        ("beta1", o.beta1.to_string()),
        ("beta2", o.beta2.to_string()),
        ("eps", o.eps.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

/// Every recognised key with its default value, in declaration order.
pub fn default_entries() -> Vec<(String, String)> {
    let desk = DeskConfig::default();
    let mut e: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| e.push((k.to_string(), v));
    put("seed", "0".into());

    let c = &desk.corpus;
    put("corpus.shapes", c.shapes.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
    put("corpus.colors", c.colors.join(","));
    put("corpus.canvas", c.canvas.to_string());
    put("corpus.n_generation", c.n_generation.to_string());
    put("corpus.n_understanding", c.n_understanding.to_string());
    put("corpus.n_editing", c.n_editing.to_string());
    put("corpus.n_natural_language", c.n_natural_language.to_string());

    let m = MixtureConfig::reference(desk.records, 0);
    for (f, r) in &m.ratios {
        put(&format!("data.ratio.{}", f.name()), r.to_string());
    }
    put("data.total", desk.records.to_string());
    put("data.max_tokens", desk.max_tokens.to_string());
    put("data.max_vocab", desk.max_vocab.to_string());
    put("data.mask_user_turns", m.mask_user_turns.to_string());
    put("data.held_out", "false".into());

    for (k, v) in desk.model.to_map() {
        if k != "vocab_size" && k != "image_size" {
            put(&format!("model.{k}"), v);
        }
    }

    let cl = &desk.clip;
    put("clip.steps", cl.steps.to_string());
    put("clip.batch_size", cl.batch_size.to_string());
    let mut tail = Vec::new();
    optim_entries("clip", &cl.optim, &mut tail);

    let d = &desk.diffusion;
    tail.push(("diffusion.vae_steps".into(), d.vae_steps.to_string()));
    tail.push(("diffusion.unet_steps".into(), d.unet_steps.to_string()));
    tail.push(("diffusion.batch_size".into(), d.batch_size.to_string()));
    tail.push(("diffusion.cond_dropout".into(), d.cond_dropout.to_string()));
    tail.push(("diffusion.kl_weight".into(), d.kl_weight.to_string()));
    optim_entries("diffusion", &d.optim, &mut tail);

    let t = &desk.train;
    tail.push(("train.steps".into(), t.steps.to_string()));
    tail.push(("train.batch_size".into(), t.batch_size.to_string()));
    tail.push(("train.lambda_lm".into(), t.lambda_lm.to_string()));
    tail.push(("train.lambda_diff".into(), t.lambda_diff.to_string()));
    tail.push(("train.diff_samples_per_record".into(), t.diff_samples_per_record.to_string()));
    tail.push(("train.cond_dropout".into(), t.cond_dropout.to_string()));
    tail.push(("train.checkpoint_every".into(), t.checkpoint_every.to_string()));
    tail.push(("train.halt_at".into(), t.halt_at.to_string()));
    optim_entries("train", &t.optim, &mut tail);

    let s = SamplerConfig::default();
    tail.push(("sampler.guidance_scale".into(), s.guidance_scale.to_string()));
    tail.push(("sampler.sample_steps".into(), s.sample_steps.to_string()));

    let dc = DecodeConfig::default();
    tail.push(("decode.max_new_tokens".into(), dc.max_new_tokens.to_string()));
    tail.push(("decode.temperature".into(), dc.temperature.to_string()));
    tail.push(("decode.top_k".into(), dc.top_k.to_string()));
    tail.push(("decode.constrained".into(), dc.constrained.to_string()));

    let n = EvalCounts::default();
    tail.push(("eval.captions".into(), n.captions.to_string()));
    tail.push(("eval.edits".into(), n.edits.to_string()));
    tail.push(("eval.vqa".into(), n.vqa.to_string()));
    tail.push(("eval.real".into(), n.real.to_string()));
    tail.push(("eval.samples_per_caption".into(), EvalConfig::default().samples_per_caption.to_string()));
    tail.push(("eval.metrics".into(), Metric::ALL.iter().map(|m| m.name()).collect::<Vec<_>>().join(",")));

    tail.push(("gradcheck.per_component".into(), "20".into()));
    tail.push(("gradcheck.batch_size".into(), "4".into()));
    e.extend(tail);
    e
}

/// Resolved configuration; every key is known and every value present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: default_entries().into_iter().collect() }
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// `GENVIT_TRAIN__LEARNING_RATE` names `train.learning_rate`.
pub fn env_key(var: &str) -> Option<String> {
    var.strip_prefix(ENV_PREFIX).map(|k| k.to_ascii_lowercase().replace("__", "."))
}

/// Non-integer numbers in the formatting the defaults use, so equal values hash equally.
fn canonical(value: &str) -> String {
    if value.parse::<i128>().is_err() {
        if let Ok(x) = value.parse::<f64>() {
            if x.is_finite() {
                return x.to_string();
            }
        }
    }
    value.to_string()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == HASH_KEY {
            return Ok(());
        }
        match self.values.get_mut(key) {
            Some(v) => {
                *v = canonical(value.trim());
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies file, then environment, then flag overrides.
    pub fn resolve(
        file: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut c = Self::default();
        if let Some(text) = file {
            for (k, v) in parse_pairs(text)? {
                c.set(&k, &v)?;
            }
        }
        let mut env: Vec<(String, String)> = env.into_iter().filter_map(|(k, v)| env_key(&k).map(|k| (k, v))).collect();
        env.sort();
        for (k, v) in env {
            c.set(&k, &v).map_err(|_| Error::Config(format!("unknown config key `{k}` from the environment")))?;
        }
        for (k, v) in flags {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path, flags: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::resolve(Some(&text), std::env::vars(), flags)
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_else(|| panic!("config key `{key}` is not registered"))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    /// Hex SHA-256 prefix over the sorted `key=value` lines.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("# {HASH_KEY} = {}\n", self.hash());
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model()?;
        self.corpus()?.validate()?;
        self.mixture()?.validate()?;
        self.clip()?.optim.validate()?;
        self.diffusion()?.optim.validate()?;
        self.train()?.validate()?;
        self.decode()?;
        self.eval()?;
        self.metrics()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("seed")
    }

    fn optim(&self, prefix: &str) -> Result<OptimConfig> {
        let p = |k: &str| self.parse::<f64>(&format!("{prefix}.{k}"));
        Ok(OptimConfig {
            learning_rate: p("learning_rate")?,
            warmup_ratio: p("warmup_ratio")?,
            weight_decay: p("weight_decay")?,
            max_grad_norm: p("max_grad_norm")?,
            beta1: p("beta1")?,
            beta2: p("beta2")?,
            eps: p("eps")?,
        })
    }

    pub fn corpus(&self) -> Result<CorpusSpec> {
        let shapes = self
            .get("corpus.shapes")
            .split(',')
            .map(|s| {
                let s = s.trim();
                Shape::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| Error::Config(format!("unknown shape `{s}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let colors = self.get("corpus.colors").split(',').map(|s| s.trim().to_string()).collect();
        Ok(CorpusSpec {
            shapes,
            colors,
            canvas: self.parse("corpus.canvas")?,
            n_generation: self.parse("corpus.n_generation")?,
            n_understanding: self.parse("corpus.n_understanding")?,
            n_editing: self.parse("corpus.n_editing")?,
            n_natural_language: self.parse("corpus.n_natural_language")?,
            ..CorpusSpec::default()
        })
    }

    pub fn mixture(&self) -> Result<MixtureConfig> {
        let mut m = MixtureConfig::reference(self.parse("data.total")?, self.seed()?);
        for (f, r) in m.ratios.iter_mut() {
            *r = self.parse(&format!("data.ratio.{}", f.name()))?;
        }
        m.max_tokens = self.parse("data.max_tokens")?;
        m.mask_user_turns = self.parse("data.mask_user_turns")?;
        Ok(m)
    }

    /// Model shape; `vocab_size` and `image_size` come from the data.
    pub fn model(&self) -> Result<ModelConfig> {
        let m: BTreeMap<String, String> = self
            .values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("model.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let mut c = ModelConfig::from_map(&m)?;
        c.image_size = self.parse("corpus.canvas")?;
        c.validate()?;
        Ok(c)
    }

    pub fn clip(&self) -> Result<ClipConfig> {
        Ok(ClipConfig {
            optim: self.optim("clip")?,
            batch_size: self.parse("clip.batch_size")?,
            steps: self.parse("clip.steps")?,
            seed: self.seed()?,
        })
    }

    pub fn diffusion(&self) -> Result<DiffusionPretrainConfig> {
        Ok(DiffusionPretrainConfig {
            optim: self.optim("diffusion")?,
            batch_size: self.parse("diffusion.batch_size")?,
            vae_steps: self.parse("diffusion.vae_steps")?,
            unet_steps: self.parse("diffusion.unet_steps")?,
            seed: self.seed()?,
            cond_dropout: self.parse("diffusion.cond_dropout")?,
            kl_weight: self.parse("diffusion.kl_weight")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            optim: self.optim("train")?,
            batch_size: self.parse("train.batch_size")?,
            steps: self.parse("train.steps")?,
            seed: self.seed()?,
            lambda_lm: self.parse("train.lambda_lm")?,
            lambda_diff: self.parse("train.lambda_diff")?,
            diff_samples_per_record: self.parse("train.diff_samples_per_record")?,
            cond_dropout: self.parse("train.cond_dropout")?,
            checkpoint_every: self.parse("train.checkpoint_every")?,
            halt_at: self.parse("train.halt_at")?,
        })
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            guidance_scale: self.parse("sampler.guidance_scale")?,
            sample_steps: self.parse("sampler.sample_steps")?,
            seed: self.seed()?,
        })
    }

    pub fn decode(&self) -> Result<DecodeConfig> {
        Ok(DecodeConfig {
            max_new_tokens: self.parse("decode.max_new_tokens")?,
            temperature: self.parse("decode.temperature")?,
            top_k: self.parse("decode.top_k")?,
            constrained: self.parse("decode.constrained")?,
            seed: self.seed()?,
        })
    }

    pub fn eval_counts(&self) -> Result<EvalCounts> {
        Ok(EvalCounts {
            captions: self.parse("eval.captions")?,
            edits: self.parse("eval.edits")?,
            vqa: self.parse("eval.vqa")?,
            real: self.parse("eval.real")?,
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            sampler: self.sampler()?,
            samples_per_caption: self.parse("eval.samples_per_caption")?,
            config_hash: self.hash(),
        })
    }

    pub fn metrics(&self) -> Result<Vec<Metric>> {
        self.get("eval.metrics").split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse()).collect()
    }

    pub fn desk(&self) -> Result<DeskConfig> {
        Ok(DeskConfig {
            seed: self.seed()?,
            corpus: self.corpus()?,
            records: self.parse("data.total")?,
            max_vocab: self.parse("data.max_vocab")?,
            max_tokens: self.parse("data.max_tokens")?,
            model: self.model()?,
            clip: self.clip()?,
            diffusion: self.diffusion()?,
            train: self.train()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_numbers_hash_equally() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        a.set("train.learning_rate", "2e-5").unwrap();
        b.set("train.learning_rate", "0.00002").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.get("train.learning_rate"), "0.00002");
        a.set("seed", "18446744073709551615").unwrap();
        assert_eq!(a.get("seed"), "18446744073709551615");
    }

    #[test]
    fn defaults_round_trip_through_structs() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.train().unwrap(), DeskConfig::default().train);
        assert_eq!(c.clip().unwrap(), DeskConfig::default().clip);
        assert_eq!(c.diffusion().unwrap(), DeskConfig::default().diffusion);
        assert_eq!(c.corpus().unwrap(), CorpusSpec::default());
    }

    #[test]
    fn precedence_file_env_flag() {
        let file = "train.steps = 5\ntrain.batch_size = 7\nseed = 1\n";
        let env = vec![("GENVIT_TRAIN__STEPS".to_string(), "6".to_string()), ("PATH".into(), "/bin".into())];
        let flags = vec![("seed".to_string(), "9".to_string())];
        let c = RunConfig::resolve(Some(file), env, &flags).unwrap();
        assert_eq!(c.get("train.steps"), "6");
        assert_eq!(c.get("train.batch_size"), "7");
        assert_eq!(c.get("seed"), "9");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::resolve(Some("nope = 1"), vec![], &[]), Err(Error::Config(_))));
        let env = vec![("GENVIT_NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::resolve(None, env, &[]).is_err());
        assert!(RunConfig::resolve(Some("no equals sign"), vec![], &[]).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::resolve(Some("seed = 3\ntrain.steps = 9"), vec![], &[]).unwrap();
        let b = RunConfig::resolve(Some("train.steps = 9\nseed = 3"), vec![], &[]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn resolved_file_reparses_to_same_config() {
        let a = RunConfig::resolve(Some("train.learning_rate = 2e-5"), vec![], &[]).unwrap();
        let b = RunConfig::resolve(Some(&a.to_file_string()), vec![], &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(RunConfig::resolve(Some("train.steps = many"), vec![], &[]).is_err());
        assert!(RunConfig::resolve(Some("eval.metrics = bleu"), vec![], &[]).is_err());
        assert!(RunConfig::resolve(Some("corpus.shapes = hexagon"), vec![], &[]).is_err());
    }
}
