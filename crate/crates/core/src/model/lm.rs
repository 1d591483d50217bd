//! Decoder-only LM over `[visual prefix] ++ [token embeddings]` with a KV cache for decoding.

use genvit_autograd::{Graph, Mask, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::nn::{self, Init};
use crate::error::{Error, Result};
use crate::tokenizer::{SpecialTokens, TokenId};

pub fn init_lm(init: &mut Init<'_>, c: &ModelConfig) {
    let gain = 1.0 / (2.0 * c.n_layers as f64).sqrt();
    init.normal("lm/wte", &[c.vocab_size, c.d_lm], 0.1);
    init.normal("lm/wpe", &[c.context_len, c.d_lm], 0.05);
    if c.distinct_img_embeddings {
        init.normal("lm/img_slots", &[c.n_img, c.d_lm], 0.1);
    }
    for i in 0..c.n_layers {
        init.encoder_block(&format!("lm/blocks.{i}"), c.d_lm, gain);
    }
    init.layer_norm("lm/ln_f", c.d_lm);
    init.linear("lm/head", c.d_lm, c.vocab_size);
}

/// Per-token slot index: `k + 1` for the k-th [IMG] token, 0 otherwise.
pub fn img_slots(ids: &[TokenId], sp: &SpecialTokens, n_img: usize, already: usize) -> Vec<usize> {
    let mut k = already;
    ids.iter()
        .map(|&t| {
            if t == sp.img {
                k += 1;
                k.min(n_img)
            } else {
                0
            }
        })
        .collect()
}

/// `[n, d_lm]` token embeddings; distinct-slot mode adds a per-slot vector to [IMG] rows.
pub fn embed_tokens<S: Scalar>(g: &mut Graph<'_, S>, ids: &[TokenId], slots: &[usize], c: &ModelConfig) -> Var {
    let wte = g.param("lm/wte");
    let x = g.gather_rows(wte, ids);
    if !c.distinct_img_embeddings || slots.iter().all(|&s| s == 0) {
        return x;
    }
    let table = g.param("lm/img_slots");
    let zero = g.constant(Tensor::zeros(&[1, c.d_lm]));
    let padded = g.concat(&[zero, table], 0);
    let extra = g.gather_rows(padded, slots);
    g.add(x, extra)
}

/// Word embedding of each [IMG] slot, `[N, d_lm]`.
pub fn img_embeddings<S: Scalar>(g: &mut Graph<'_, S>, sp: &SpecialTokens, c: &ModelConfig) -> Var {
    let ids = vec![sp.img; c.n_img];
    let slots: Vec<usize> = (1..=c.n_img).collect();
    embed_tokens(g, &ids, &slots, c)
}

/// Cached keys and values per layer, each `[1, t, d_lm]`.
#[derive(Debug, Clone, Default)]
pub struct KvCache<S> {
    pub k: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(c: &ModelConfig) -> Self {
        Self {
            k: vec![Tensor::zeros(&[1, 0, c.d_lm]); c.n_layers],
            v: vec![Tensor::zeros(&[1, 0, c.d_lm]); c.n_layers],
            len: 0,
        }
    }
}

pub struct LmOut {
    /// `[B, T, V]`
    pub logits: Var,
    /// `[B, T, d_lm]` final-layer states after the last layer norm.
    pub hidden: Var,
}

/// Runs the transformer stack on `[B, T, d]` inputs that already carry positions.
/// With a cache (batch of one) new keys/values are appended and attention
/// covers the cached prefix.
pub fn lm_blocks<S: Scalar>(g: &mut Graph<'_, S>, mut x: Var, c: &ModelConfig, mut cache: Option<&mut KvCache<S>>) -> LmOut {
    let past = cache.as_ref().map(|k| k.len).unwrap_or(0);
    let t_new = g.shape(x)[1];
    for i in 0..c.n_layers {
        let name = format!("lm/blocks.{i}");
        let h = nn::layer_norm(g, x, &format!("{name}/ln1"));
        let q = nn::linear(g, h, &format!("{name}/attn/q"));
        let mut k = nn::linear(g, h, &format!("{name}/attn/k"));
        let mut v = nn::linear(g, h, &format!("{name}/attn/v"));
        if let Some(cache) = cache.as_deref_mut() {
            if past > 0 {
                let pk = g.constant(cache.k[i].clone());
                let pv = g.constant(cache.v[i].clone());
                k = g.concat(&[pk, k], 1);
                v = g.concat(&[pv, v], 1);
            }
            cache.k[i] = g.value(k).clone();
            cache.v[i] = g.value(v).clone();
        }
        let o = nn::attend(g, q, k, v, c.n_heads, Mask::Causal { offset: past });
        let o = nn::linear(g, o, &format!("{name}/attn/o"));
        x = g.add(x, o);
        let h = nn::layer_norm(g, x, &format!("{name}/ln2"));
        let h = nn::mlp(g, h, &format!("{name}/mlp"));
        x = g.add(x, h);
    }
    if let Some(cache) = cache {
        cache.len = past + t_new;
    }
    let hidden = nn::layer_norm(g, x, "lm/ln_f");
    let logits = nn::linear(g, hidden, "lm/head");
    LmOut { logits, hidden }
}

/// One training/eval sequence: optional projected patches `[P, d_lm]` and token ids.
pub struct LmInput<'a> {
    pub visual: Option<Var>,
    pub ids: &'a [TokenId],
}

/// Layout of a padded batch: row of token `k` of item `b` is `prefix[b] + k`.
pub struct BatchLayout {
    pub t: usize,
    pub prefix: Vec<usize>,
    pub lens: Vec<usize>,
}

impl BatchLayout {
    pub fn row(&self, b: usize, k: usize) -> usize {
        b * self.t + self.prefix[b] + k
    }
}

/// Right-padded batch forward. Padding sits after every real position, so the
/// causal mask keeps it invisible to real tokens.
pub fn lm_forward<S: Scalar>(
    g: &mut Graph<'_, S>,
    items: &[LmInput<'_>],
    sp: &SpecialTokens,
    c: &ModelConfig,
) -> Result<(LmOut, BatchLayout)> {
    let prefix: Vec<usize> = items.iter().map(|it| it.visual.map(|v| g.shape(v)[0]).unwrap_or(0)).collect();
    let lens: Vec<usize> = items.iter().map(|it| it.ids.len()).collect();
    let t = prefix.iter().zip(&lens).map(|(p, l)| p + l).max().unwrap_or(0);
    if t > c.context_len {
        return Err(Error::Input(format!("sequence of {t} positions exceeds context {}", c.context_len)));
    }
    if t == 0 {
        return Err(Error::Input("empty LM batch".into()));
    }
    let mut rows = Vec::with_capacity(items.len());
    for (b, it) in items.iter().enumerate() {
        let mut ids = it.ids.to_vec();
        ids.resize(t - prefix[b], sp.pad);
        let slots = img_slots(&ids, sp, c.n_img, 0);
        let tok = embed_tokens(g, &ids, &slots, c);
        let seq = match it.visual {
            Some(v) => g.concat(&[v, tok], 0),
            None => tok,
        };
        rows.push(g.reshape(seq, &[1, t, c.d_lm]));
    }
    let x = if rows.len() == 1 { rows[0] } else { g.concat(&rows, 0) };
    let wpe = g.param("lm/wpe");
    let pos = g.narrow(wpe, 0, 0, t);
    let x = g.add(x, pos);
    let out = lm_blocks(g, x, c, None);
    Ok((out, BatchLayout { t, prefix, lens }))
}

/// Next-token targets and weights over `[B*T]` rows: the row of token `k`
/// predicts token `k+1`, weighted by that token's loss-mask bit.
pub fn lm_targets<S: Scalar>(layout: &BatchLayout, ids: &[&[TokenId]], masks: &[&[bool]]) -> (Vec<usize>, Vec<S>) {
    let n = layout.t * ids.len();
    let mut targets = vec![0; n];
    let mut weights = vec![S::zero(); n];
    for (b, (seq, mask)) in ids.iter().zip(masks).enumerate() {
        for k in 0..seq.len().saturating_sub(1) {
            if mask[k + 1] {
                let r = layout.row(b, k);
                targets[r] = seq[k + 1];
                weights[r] = S::one();
            }
        }
    }
    (targets, weights)
}

/// Masked mean next-token cross-entropy.
pub fn lm_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    out: &LmOut,
    layout: &BatchLayout,
    ids: &[&[TokenId]],
    masks: &[&[bool]],
    vocab: usize,
) -> Result<Var> {
    let (targets, weights) = lm_targets::<S>(layout, ids, masks);
    if weights.iter().all(|&w| w == S::zero()) {
        return Err(Error::Numeric("loss mask selects no positions; the mean is undefined".into()));
    }
    let logits = g.reshape(out.logits, &[layout.t * ids.len(), vocab]);
    Ok(g.cross_entropy(logits, &targets, &weights))
}

/// Rows `e_img(i) + h[img_i]` for each generating item: `[B', N, d_lm]`.
pub fn extract_img_states<S: Scalar>(
    g: &mut Graph<'_, S>,
    hidden: Var,
    layout: &BatchLayout,
    items: &[(usize, &[usize])],
    sp: &SpecialTokens,
    c: &ModelConfig,
) -> Result<Var> {
    let mut idx = Vec::with_capacity(items.len() * c.n_img);
    for &(b, positions) in items {
        if positions.len() != c.n_img {
            return Err(Error::Routing(format!("expected {} [IMG] positions, found {}", c.n_img, positions.len())));
        }
        idx.extend(positions.iter().map(|&p| layout.row(b, p)));
    }
    let s = g.shape(hidden).to_vec();
    let flat = g.reshape(hidden, &[s[0] * s[1], c.d_lm]);
    let h = g.gather_rows(flat, &idx);
    let h = g.reshape(h, &[items.len(), c.n_img, c.d_lm]);
    let e = img_embeddings(g, sp, c);
    Ok(g.add(h, e))
}
