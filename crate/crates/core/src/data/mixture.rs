//! Formatting raw sources into task-tagged records and mixing them at fixed ratios.

use std::collections::{BTreeMap, HashMap, HashSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use sha2::{Digest, Sha256};

use super::{Family, InstructionRecord, RawSourceRecord, Role, Task};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::{Vocabulary, ASSISTANT, BOS, EOI, EOS, I2T, IMG, SOI, T2I, USER};

pub const REFERENCE_RATIOS: [(Family, f64); 4] = [
    (Family::NaturalLanguage, 0.0193),
    (Family::Editing, 0.0963),
    (Family::Generation, 0.2688),
    (Family::Understanding, 0.6156),
];

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureConfig {
    pub ratios: BTreeMap<Family, f64>,
    pub total: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub mask_user_turns: bool,
}

impl MixtureConfig {
    pub fn reference(total: usize, seed: u64) -> Self {
        Self { ratios: REFERENCE_RATIOS.into_iter().collect(), total, max_tokens: 2048, seed, mask_user_turns: true }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ratios.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture ratios sum to {sum}, not 1")));
        }
        if self.ratios.values().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(Error::Config("mixture ratios must lie in [0,1]".into()));
        }
        if self.total == 0 || self.max_tokens == 0 {
            return Err(Error::Config("mixture total and max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn ratio(&self, f: Family) -> f64 {
        self.ratios.get(&f).copied().unwrap_or(0.0)
    }

    /// Stable digest of every field, independent of map ordering.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for f in Family::ALL {
            s.push_str(&format!("ratio.{}={:.12}\n", f.name(), self.ratio(f)));
        }
        s.push_str(&format!(
            "total={}\nmax_tokens={}\nseed={}\nmask_user_turns={}\n",
            self.total, self.max_tokens, self.seed, self.mask_user_turns
        ));
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

/// Integer counts summing to `total`: floors first, then one extra unit to
/// the largest fractional remainders (earlier entries win ties).
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Hex digest of (task, ids, image refs); replicas past the first also hash their index.
pub fn record_id(task: Task, ids: &[usize], input: Option<&str>, target: Option<&str>, replica: usize) -> String {
    let mut h = Sha256::new();
    h.update(task.name().as_bytes());
    h.update([0u8]);
    for &id in ids {
        h.update((id as u32).to_le_bytes());
    }
    for r in [input, target] {
        h.update([0u8]);
        h.update(r.unwrap_or("").as_bytes());
    }
    if replica > 0 {
        h.update(format!("#replica={replica}").as_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

/// Drops records with an empty or whitespace-only turn.
pub fn default_source_filter(r: &RawSourceRecord) -> bool {
    r.text_turns.iter().all(|(role, t)| *role == Role::Assistant || !t.trim().is_empty())
        && r.text_turns.iter().any(|(role, _)| *role == Role::User)
}

/// Renders a source as `[BOS] <task> user: .. assistant: .. [EOS]`, appending
/// the `[SOI] [IMG]×n [EOI]` block to the final assistant turn of generating tasks.
pub fn format_text(raw: &RawSourceRecord, n_img: usize) -> String {
    let task = raw.family.task();
    let mut parts = vec![BOS.to_string(), if task.generates() { T2I } else { I2T }.to_string()];
    let last_assistant = raw.text_turns.iter().rposition(|(r, _)| *r == Role::Assistant);
    for (i, (role, text)) in raw.text_turns.iter().enumerate() {
        parts.push(if *role == Role::User { USER } else { ASSISTANT }.to_string());
        if !text.trim().is_empty() {
            parts.push(text.split_whitespace().collect::<Vec<_>>().join(" "));
        }
        if task.generates() && Some(i) == last_assistant {
            parts.push(SOI.into());
            parts.extend(std::iter::repeat_n(IMG.to_string(), n_img));
            parts.push(EOI.into());
        }
    }
    parts.push(EOS.into());
    parts.join(" ")
}

pub fn format_record(raw: &RawSourceRecord, vocab: &Vocabulary, n_img: usize, mask_user_turns: bool) -> InstructionRecord {
    let task = raw.family.task();
    let mut tokens = vocab.encode(&format_text(raw, n_img));
    if mask_user_turns {
        tokens.mask_turns(vocab.id(USER), vocab.id(ASSISTANT));
    }
    InstructionRecord {
        record_id: record_id(task, &tokens.ids, raw.input_image_ref.as_deref(), raw.target_image_ref.as_deref(), 0),
        task,
        tokens,
        input_image: raw.input_image_ref.clone(),
        target_image: raw.target_image_ref.clone(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub truncated: usize,
    pub dropped_empty: usize,
    pub dropped_broken_block: usize,
    pub duplicates: usize,
}

/// Truncates to `max_tokens` (an image block that would be cut is dropped
/// whole) and removes duplicate record ids, keeping first occurrences.
pub fn filter_and_truncate(
    records: Vec<InstructionRecord>,
    max_tokens: usize,
    vocab: &Vocabulary,
) -> (Vec<InstructionRecord>, FilterReport) {
    let sp = vocab.specials;
    let mut report = FilterReport::default();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for mut r in records {
        if r.tokens.len() > max_tokens {
            let mut cut = max_tokens;
            if let Some(soi) = r.tokens.ids[..cut].iter().rposition(|&t| t == sp.soi) {
                let closed = r.tokens.ids[soi..cut].contains(&sp.eoi);
                if !closed {
                    cut = soi;
                }
            }
            r.tokens.truncate(cut);
            report.truncated += 1;
            if r.task.generates() && !r.tokens.ids.contains(&sp.eoi) {
                report.dropped_broken_block += 1;
                continue;
            }
            r.record_id = record_id(r.task, &r.tokens.ids, r.input_image.as_deref(), r.target_image.as_deref(), 0);
        }
        if r.tokens.is_empty() {
            report.dropped_empty += 1;
            continue;
        }
        if !seen.insert(r.record_id.clone()) {
            report.duplicates += 1;
            continue;
        }
        out.push(r);
    }
    if report.dropped_empty + report.dropped_broken_block > 0 {
        warn!(
            "truncation dropped {} empty and {} block-broken records",
            report.dropped_empty, report.dropped_broken_block
        );
    }
    (out, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstructionDataset {
    pub records: Vec<InstructionRecord>,
    pub counts: BTreeMap<Family, usize>,
    pub config_hash: String,
    pub seed: u64,
    pub n_img: usize,
    pub max_tokens: usize,
    pub mask_user_turns: bool,
    pub filter: FilterReport,
}

pub fn build_mixture(
    sources: &[RawSourceRecord],
    config: &MixtureConfig,
    vocab: &Vocabulary,
    n_img: usize,
) -> Result<InstructionDataset> {
    build_mixture_with(sources, config, vocab, n_img, &default_source_filter)
}

pub fn build_mixture_with(
    sources: &[RawSourceRecord],
    config: &MixtureConfig,
    vocab: &Vocabulary,
    n_img: usize,
    keep: &dyn Fn(&RawSourceRecord) -> bool,
) -> Result<InstructionDataset> {
    config.validate()?;
    if n_img == 0 {
        return Err(Error::Config("the image block needs at least one [IMG] token".into()));
    }
    if let Some(bad) = sources.iter().find(|r| !r.refs_consistent()) {
        return Err(Error::Input(format!("{} source has inconsistent image references", bad.family.name())));
    }
    let formatted: Vec<InstructionRecord> = sources
        .iter()
        .filter(|r| keep(r))
        .map(|r| format_record(r, vocab, n_img, config.mask_user_turns))
        .collect();
    let (pool, report) = filter_and_truncate(formatted, config.max_tokens, vocab);

    let mut by_family: BTreeMap<Family, Vec<&InstructionRecord>> = BTreeMap::new();
    for r in &pool {
        by_family.entry(r.task.family()).or_default().push(r);
    }
    let ratios: Vec<f64> = Family::ALL.iter().map(|&f| config.ratio(f)).collect();
    let quotas = largest_remainder(config.total, &ratios);

    let mut records = Vec::with_capacity(config.total);
    let mut counts = BTreeMap::new();
    for (fi, (&family, &quota)) in Family::ALL.iter().zip(&quotas).enumerate() {
        counts.insert(family, quota);
        if quota == 0 {
            continue;
        }
        let members = by_family.get(&family).map(|v| v.as_slice()).unwrap_or(&[]);
        if members.is_empty() {
            return Err(Error::Config(format!("family {} has ratio > 0 but no source records", family.name())));
        }
        let mut r = rng::stream(config.seed, "mixture/select", fi as u64);
        let mut order: Vec<usize> = (0..members.len()).collect();
        order.shuffle(&mut r);
        let mut picks: Vec<usize> = order.iter().copied().take(quota).collect();
        while picks.len() < quota {
            picks.push(r.random_range(0..members.len()));
        }
        let mut replicas: HashMap<usize, usize> = HashMap::new();
        for p in picks {
            let k = replicas.entry(p).or_insert(0);
            let mut rec = members[p].clone();
            if *k > 0 {
                rec.record_id =
                    record_id(rec.task, &rec.tokens.ids, rec.input_image.as_deref(), rec.target_image.as_deref(), *k);
            }
            *k += 1;
            records.push(rec);
        }
    }
    records.shuffle(&mut rng::stream(config.seed, "mixture/shuffle", 0));

    Ok(InstructionDataset {
        records,
        counts,
        config_hash: config.hash(),
        seed: config.seed,
        n_img,
        max_tokens: config.max_tokens,
        mask_user_turns: config.mask_user_turns,
        filter: report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_small_totals() {
        assert_eq!(largest_remainder(4, &[0.25; 4]), vec![1, 1, 1, 1]);
        assert_eq!(largest_remainder(3, &[0.5, 0.5]), vec![2, 1]);
        assert_eq!(largest_remainder(10, &[0.0, 1.0]), vec![0, 10]);
    }

    #[test]
    fn replica_ids_differ() {
        let a = record_id(Task::T2i, &[1, 2], None, Some("x"), 0);
        let b = record_id(Task::T2i, &[1, 2], None, Some("x"), 1);
        assert_ne!(a, b);
        assert_eq!(a, record_id(Task::T2i, &[1, 2], None, Some("x"), 0));
        assert_ne!(a, record_id(Task::T2i, &[1, 2], Some("x"), None, 0));
    }

    #[test]
    fn format_places_block_after_assistant() {
        let raw = RawSourceRecord {
            family: Family::Generation,
            text_turns: vec![(Role::User, "draw a red circle".into()), (Role::Assistant, String::new())],
            input_image_ref: None,
            target_image_ref: Some("img_0".into()),
        };
        assert_eq!(
            format_text(&raw, 2),
            "[BOS] [T2I] user: draw a red circle assistant: [SOI] [IMG] [IMG] [EOI] [EOS]"
        );
    }
}
