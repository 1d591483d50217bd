//! Word-level tokenizer with atomic bracket specials.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const PAD: &str = "[PAD]";
pub const T2I: &str = "[T2I]";
pub const I2T: &str = "[I2T]";
pub const SOI: &str = "[SOI]";
pub const EOI: &str = "[EOI]";
pub const IMG: &str = "[IMG]";
pub const UNK: &str = "[UNK]";

/// Surface forms in id order; the unknown token follows the eight specials.
pub const RESERVED: [&str; 9] = [BOS, EOS, PAD, T2I, I2T, SOI, EOI, IMG, UNK];

pub const USER: &str = "user:";
pub const ASSISTANT: &str = "assistant:";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
    pub t2i: TokenId,
    pub i2t: TokenId,
    pub soi: TokenId,
    pub eoi: TokenId,
    pub img: TokenId,
    pub unk: TokenId,
}

impl SpecialTokens {
    pub const FIXED: SpecialTokens =
        SpecialTokens { bos: 0, eos: 1, pad: 2, t2i: 3, i2t: 4, soi: 5, eoi: 6, img: 7, unk: 8 };

    pub fn is_visual(&self, id: TokenId) -> bool {
        id == self.soi || id == self.eoi || id == self.img
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub img_positions: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn from_ids(ids: Vec<TokenId>, sp: &SpecialTokens) -> Self {
        let img_positions = ids.iter().enumerate().filter(|(_, &t)| t == sp.img).map(|(i, _)| i).collect();
        let loss_mask = vec![true; ids.len()];
        Self { ids, loss_mask, img_positions }
    }

    /// Loss mask over assistant turns: tokens after an `assistant:` marker up
    /// to the next `user:` marker. Markers and anything before the first
    /// assistant turn stay masked out.
    pub fn mask_turns(&mut self, user_id: TokenId, assistant_id: TokenId) {
        let mut in_assistant = false;
        for (m, &t) in self.loss_mask.iter_mut().zip(&self.ids) {
            if t == user_id {
                in_assistant = false;
                *m = false;
            } else if t == assistant_id {
                in_assistant = true;
                *m = false;
            } else {
                *m = in_assistant;
            }
        }
    }

    pub fn truncate(&mut self, len: usize) {
        self.ids.truncate(len);
        self.loss_mask.truncate(len);
        self.img_positions.retain(|&p| p < len);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    pub specials: SpecialTokens,
}

impl Vocabulary {
    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index, specials: SpecialTokens::FIXED }
    }

    /// Counts whitespace-split words, keeps the `max_size - 8` most frequent
    /// (ties broken lexicographically) after the reserved entries.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size < 8 {
            return Err(Error::Config(format!("vocabulary max_size {max_size} leaves no room for specials")));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for w in line.as_ref().split_whitespace() {
                if !RESERVED.contains(&w) {
                    *freq.entry(w).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - 8);
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(ranked.into_iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_words(words))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(self.specials.unk)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let spaced = isolate_specials(text);
        let ids = spaced.split_whitespace().map(|w| self.id(w)).collect();
        TokenSequence::from_ids(ids, &self.specials)
    }

    pub fn decode_ids(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let w = self
                .word(id)
                .ok_or_else(|| Error::Decode(format!("token id {id} out of vocabulary of {}", self.len())))?;
            if i > 0 {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        self.decode_ids(&seq.ids)
    }

    /// `word<TAB>id` per line, reserved entries first.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let _ = writeln!(s, "{w}\t{i}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("vocabulary line {} lacks a tab", n + 1)))?;
            let id: TokenId =
                id.trim().parse().map_err(|_| Error::Config(format!("vocabulary line {}: bad id", n + 1)))?;
            if by_id.insert(id, w.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary id {id}")));
            }
        }
        let words: Vec<String> = by_id.values().cloned().collect();
        if by_id.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::Config("vocabulary ids are not contiguous from 0".into()));
        }
        if words.len() < RESERVED.len() || words.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocabulary does not start with the reserved specials".into()));
        }
        Ok(Self::from_words(words))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_file_string(&text)
    }
}

/// Pads bracket specials with spaces so `"[SOI][IMG]"` splits into two words.
fn isolate_specials(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let mut rest = text;
    'outer: while !rest.is_empty() {
        if rest.starts_with('[') {
            for s in RESERVED {
                if let Some(tail) = rest.strip_prefix(s) {
                    out.push(' ');
                    out.push_str(s);
                    out.push(' ');
                    rest = tail;
                    continue 'outer;
                }
            }
        }
        let ch = rest.chars().next().unwrap();
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}
