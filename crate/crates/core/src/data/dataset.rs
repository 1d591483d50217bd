//! On-disk dataset layout:
//!
//! ```text
//! <dir>/dataset.jsonl   one record per line
//! <dir>/manifest.json
//! <dir>/vocab.txt
//! <dir>/captions.tsv    image id <TAB> caption
//! <dir>/images/<id>.ppm
//! ```
//!
//! A raw corpus directory holds `corpus.jsonl` (one source record per line),
//! `captions.tsv` and `images/`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, ImageStore};
use super::mixture::InstructionDataset;
use super::{InstructionRecord, RawSourceRecord, Task};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::tokenizer::{Vocabulary, ASSISTANT, USER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub total: usize,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    pub seed: u64,
    pub held_out: bool,
    pub n_img_tokens: usize,
    pub max_tokens: usize,
    pub mask_user_turns: bool,
    pub vocab_size: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct RecordLine {
    record_id: String,
    task: String,
    text: String,
    input_image: Option<String>,
    target_image: Option<String>,
}

/// Everything a reader gets back from a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetFiles {
    pub records: Vec<InstructionRecord>,
    pub manifest: Manifest,
    pub vocab: Vocabulary,
    pub images: ImageStore,
}

fn image_path(id: &str) -> String {
    format!("images/{id}.ppm")
}

fn image_id(path: &str) -> Result<String> {
    path.strip_prefix("images/")
        .and_then(|p| p.strip_suffix(".ppm"))
        .map(|s| s.to_string())
        .ok_or_else(|| Error::Input(format!("image path `{path}` is not under images/")))
}

fn schema(r: &InstructionRecord, reason: impl Into<String>) -> Error {
    Error::Schema { record_id: r.record_id.clone(), reason: reason.into() }
}

pub fn validate_record(r: &InstructionRecord, vocab: &Vocabulary, n_img: usize, max_tokens: usize) -> Result<()> {
    let sp = vocab.specials;
    let ids = &r.tokens.ids;
    if ids.is_empty() {
        return Err(schema(r, "empty token sequence"));
    }
    if ids.len() > max_tokens {
        return Err(schema(r, format!("{} tokens exceed the limit of {max_tokens}", ids.len())));
    }
    if r.tokens.loss_mask.len() != ids.len() {
        return Err(schema(r, "loss mask length differs from token count"));
    }
    let img_at: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] == sp.img).collect();
    if img_at != r.tokens.img_positions {
        return Err(schema(r, "img_positions do not match the [IMG] tokens"));
    }
    let count = |t| ids.iter().filter(|&&x| x == t).count();
    let (input, target) = (r.input_image.is_some(), r.target_image.is_some());
    if r.task.generates() {
        if count(sp.t2i) != 1 || count(sp.i2t) != 0 {
            return Err(schema(r, "generating records need exactly one [T2I] and no [I2T]"));
        }
        if count(sp.soi) != 1 || count(sp.eoi) != 1 {
            return Err(schema(r, "generating records need exactly one [SOI] .. [EOI] block"));
        }
        let soi = ids.iter().position(|&t| t == sp.soi).unwrap();
        let eoi = ids.iter().position(|&t| t == sp.eoi).unwrap();
        if eoi <= soi || eoi - soi - 1 != n_img || img_at.len() != n_img || ids[soi + 1..eoi].iter().any(|&t| t != sp.img) {
            return Err(schema(r, format!("image block must hold exactly {n_img} [IMG] tokens")));
        }
        if !target || (r.task == Task::Edit) != input {
            return Err(schema(r, "image references do not match the task"));
        }
    } else {
        if count(sp.i2t) != 1 || count(sp.t2i) != 0 {
            return Err(schema(r, "understanding records need exactly one [I2T] and no [T2I]"));
        }
        if ids.iter().any(|&t| sp.is_visual(t)) {
            return Err(schema(r, "understanding records cannot contain image-block tokens"));
        }
        if target || (r.task == Task::I2t) != input {
            return Err(schema(r, "image references do not match the task"));
        }
    }
    Ok(())
}

/// Writes the dataset directory; every record is validated first.
pub fn write_dataset(
    dir: &Path,
    ds: &InstructionDataset,
    vocab: &Vocabulary,
    images: &ImageStore,
    held_out: bool,
) -> Result<Manifest> {
    let mut seen = HashSet::new();
    for r in &ds.records {
        validate_record(r, vocab, ds.n_img, ds.max_tokens)?;
        if !seen.insert(&r.record_id) {
            return Err(schema(r, "duplicate record id"));
        }
    }
    let mut lines = String::new();
    let mut used = BTreeSet::new();
    for r in &ds.records {
        used.extend(r.input_image.iter().cloned());
        used.extend(r.target_image.iter().cloned());
        let line = RecordLine {
            record_id: r.record_id.clone(),
            task: r.task.name().into(),
            text: vocab.decode(&r.tokens)?,
            input_image: r.input_image.as_deref().map(image_path),
            target_image: r.target_image.as_deref().map(image_path),
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    write_images(dir, images, &used)?;
    let manifest = Manifest {
        total: ds.records.len(),
        counts: ds.counts.iter().map(|(f, &n)| (f.name().to_string(), n)).collect(),
        config_hash: ds.config_hash.clone(),
        seed: ds.seed,
        held_out,
        n_img_tokens: ds.n_img,
        max_tokens: ds.max_tokens,
        mask_user_turns: ds.mask_user_turns,
        vocab_size: vocab.len(),
    };
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("dataset.jsonl", &lines)?;
    write("manifest.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    vocab.save(&dir.join("vocab.txt"))?;
    Ok(manifest)
}

/// Reads and re-validates a dataset directory, loading every referenced image.
pub fn read_dataset(dir: &Path) -> Result<DatasetFiles> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest: Manifest = serde_json::from_str(&read("manifest.json")?)?;
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    if vocab.len() != manifest.vocab_size {
        return Err(Error::Config(format!(
            "vocab.txt has {} entries but the manifest records {}",
            vocab.len(),
            manifest.vocab_size
        )));
    }
    let mut images = ImageStore { captions: read_captions(dir)?, ..ImageStore::default() };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in read("dataset.jsonl")?.lines().enumerate() {
        let l: RecordLine = serde_json::from_str(line)?;
        let task = Task::parse(&l.task)
            .ok_or_else(|| Error::Input(format!("dataset line {}: unknown task `{}`", n + 1, l.task)))?;
        let mut tokens = vocab.encode(&l.text);
        if manifest.mask_user_turns {
            tokens.mask_turns(vocab.id(USER), vocab.id(ASSISTANT));
        }
        let rec = InstructionRecord {
            record_id: l.record_id,
            task,
            tokens,
            input_image: l.input_image.as_deref().map(image_id).transpose()?,
            target_image: l.target_image.as_deref().map(image_id).transpose()?,
        };
        validate_record(&rec, &vocab, manifest.n_img_tokens, manifest.max_tokens)?;
        if !seen.insert(rec.record_id.clone()) {
            return Err(schema(&rec, "duplicate record id"));
        }
        for id in rec.input_image.iter().chain(rec.target_image.iter()) {
            if !images.images.contains_key(id) {
                let img = ImageTensor::load_ppm(&dir.join(image_path(id)))?;
                images.images.insert(id.clone(), img);
            }
        }
        records.push(rec);
    }
    if records.len() != manifest.total {
        return Err(Error::Input(format!("manifest lists {} records, found {}", manifest.total, records.len())));
    }
    Ok(DatasetFiles { records, manifest, vocab, images })
}

fn write_images(dir: &Path, images: &ImageStore, ids: &BTreeSet<String>) -> Result<()> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut captions = String::new();
    for id in ids {
        images.get(id)?.save_ppm(&dir.join(image_path(id)))?;
        let _ = writeln!(captions, "{id}\t{}", images.captions.get(id).map(|s| s.as_str()).unwrap_or(""));
    }
    let p = dir.join("captions.tsv");
    fs::write(&p, captions).map_err(|e| Error::io(&p, e))
}

fn read_captions(dir: &Path) -> Result<BTreeMap<String, String>> {
    let p = dir.join("captions.tsv");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (id, cap) = l.split_once('\t').unwrap_or((l, ""));
            (id.to_string(), cap.to_string())
        })
        .collect())
}

pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let ids: BTreeSet<String> = corpus.images.images.keys().cloned().collect();
    write_images(dir, &corpus.images, &ids)?;
    let mut lines = String::new();
    for r in &corpus.records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    let p = dir.join("corpus.jsonl");
    fs::write(&p, lines).map_err(|e| Error::io(&p, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mut images = ImageStore { captions: read_captions(dir)?, ..ImageStore::default() };
    for id in images.captions.keys() {
        images.images.insert(id.clone(), ImageTensor::load_ppm(&dir.join(image_path(id)))?);
    }
    let p = dir.join("corpus.jsonl");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let r: RawSourceRecord =
            serde_json::from_str(line).map_err(|e| Error::Input(format!("corpus line {}: {e}", n + 1)))?;
        for id in r.input_image_ref.iter().chain(r.target_image_ref.iter()) {
            images.get(id)?;
        }
        records.push(r);
    }
    Ok(Corpus { records, images })
}
