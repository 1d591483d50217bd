//! Caption encoder: token-level conditioning rows and a pooled contrastive embedding.

use genvit_autograd::{Graph, Mask, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::nn::{self, Init};
use crate::tokenizer::{TokenId, Vocabulary};

pub fn init_text(init: &mut Init<'_>, c: &ModelConfig) {
    let gain = 1.0 / (2.0 * c.text_layers as f64).sqrt();
    init.normal("text/wte", &[c.vocab_size, c.d_u], 0.1);
    init.normal("text/pos", &[c.n_queries, c.d_u], 0.1);
    for i in 0..c.text_layers {
        init.encoder_block(&format!("text/blocks.{i}"), c.d_u, gain);
    }
    init.layer_norm("text/ln_f", c.d_u);
    init.linear("text/cond", c.d_u, c.d_u);
    init.linear("clip/txt_proj", c.d_u, c.clip_dim);
}

/// Caption words truncated or padded to the encoder length.
pub fn caption_ids(caption: &str, vocab: &Vocabulary, len: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = vocab.encode(caption).ids.into_iter().take(len).collect();
    ids.resize(len, vocab.specials.pad);
    ids
}

pub struct TextOut {
    /// `[B, L, d_u]` conditioning rows.
    pub cond: Var,
    /// `[B, d_u]` mean over non-pad positions.
    pub pooled: Var,
}

pub fn text_forward<S: Scalar>(g: &mut Graph<'_, S>, ids: &[Vec<TokenId>], pad: TokenId, c: &ModelConfig) -> TextOut {
    let (b, l) = (ids.len(), c.n_queries);
    let flat: Vec<TokenId> = ids.iter().flatten().copied().collect();
    let wte = g.param("text/wte");
    let x = g.gather_rows(wte, &flat);
    let x = g.reshape(x, &[b, l, c.d_u]);
    let pos = g.param("text/pos");
    let mut x = g.add(x, pos);
    for i in 0..c.text_layers {
        x = nn::encoder_block(g, x, &format!("text/blocks.{i}"), c.text_heads, Mask::None);
    }
    let h = nn::layer_norm(g, x, "text/ln_f");
    let cond = nn::linear(g, h, "text/cond");

    let mut weights = Vec::with_capacity(b * l);
    for row in ids {
        let n = row.iter().filter(|&&t| t != pad).count().max(1) as f64;
        weights.extend(row.iter().map(|&t| if t != pad { S::from_f64(1.0 / n) } else { S::zero() }));
    }
    let w = g.constant(Tensor::new(&[b, l, 1], weights));
    let hw = g.mul(h, w);
    let pooled = g.sum_axis(hw, 1);
    TextOut { cond, pooled }
}

pub fn clip_text_embed<S: Scalar>(g: &mut Graph<'_, S>, pooled: Var) -> Var {
    nn::linear(g, pooled, "clip/txt_proj")
}

/// Row-wise L2 normalization of `[B, d]`.
pub fn normalize_rows<S: Scalar>(g: &mut Graph<'_, S>, x: Var) -> Var {
    let b = g.shape(x)[0];
    let sq = g.square(x);
    let n = g.sum_axis(sq, 1);
    let n = g.reshape(n, &[b, 1]);
    let n = g.shift(n, 1e-12);
    let n = g.sqrt(n);
    g.div(x, n)
}

/// Symmetric InfoNCE over in-batch pairs at a fixed temperature.
pub fn clip_loss<S: Scalar>(g: &mut Graph<'_, S>, img: Var, txt: Var, temperature: f64) -> Var {
    let b = g.shape(img)[0];
    let i = normalize_rows(g, img);
    let t = normalize_rows(g, txt);
    let logits = g.matmul_t(i, t);
    let logits = g.scale(logits, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    let ones = vec![S::one(); b];
    let l_it = g.cross_entropy(logits, &targets, &ones);
    let lt = g.permute(logits, &[1, 0]);
    let l_ti = g.cross_entropy(lt, &targets, &ones);
    let s = g.add(l_it, l_ti);
    g.scale(s, 0.5)
}
