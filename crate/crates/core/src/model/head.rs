//! Generation head: encoder over the [IMG] features, decoder over learnable queries.

use genvit_autograd::{Graph, Mask, Scalar, Var};

use super::config::ModelConfig;
use super::nn::{self, Init};

pub fn init_head(init: &mut Init<'_>, c: &ModelConfig) {
    let gain = 1.0 / (2.0 * (c.head_enc_layers + c.head_dec_layers) as f64).sqrt();
    init.linear("gen_head/in", c.d_lm, c.head_dim);
    for i in 0..c.head_enc_layers {
        init.encoder_block(&format!("gen_head/enc.{i}"), c.head_dim, gain);
    }
    init.layer_norm("gen_head/ln_mem", c.head_dim);
    init.normal("gen_head/queries", &[c.n_queries, c.head_dim], 0.5);
    for i in 0..c.head_dec_layers {
        init.decoder_block(&format!("gen_head/dec.{i}"), c.head_dim, c.head_dim, gain);
    }
    init.layer_norm("gen_head/ln_f", c.head_dim);
    init.linear("gen_head/out", c.head_dim, c.d_u);
}

/// `[B, N, d_lm]` -> `[B, L, d_u]` in a single pass.
pub fn head_forward<S: Scalar>(g: &mut Graph<'_, S>, feats: Var, c: &ModelConfig) -> Var {
    let b = g.shape(feats)[0];
    let mut m = nn::linear(g, feats, "gen_head/in");
    for i in 0..c.head_enc_layers {
        m = nn::encoder_block(g, m, &format!("gen_head/enc.{i}"), c.head_heads, Mask::None);
    }
    let mem = nn::layer_norm(g, m, "gen_head/ln_mem");
    let q = g.param("gen_head/queries");
    let zeros = g.constant(genvit_autograd::Tensor::zeros(&[b, c.n_queries, c.head_dim]));
    let mut x = g.add(zeros, q);
    for i in 0..c.head_dec_layers {
        x = nn::decoder_block(g, x, mem, &format!("gen_head/dec.{i}"), c.head_heads, c.head_causal);
    }
    let x = nn::layer_norm(g, x, "gen_head/ln_f");
    nn::linear(g, x, "gen_head/out")
}
