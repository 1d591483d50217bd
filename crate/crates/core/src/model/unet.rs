//! Noise-prediction UNet over NHWC latents with one cross-attention layer in the middle.
//!
//! ```text
//! conv_in -> down1 (s1) -> stride-2 conv -> down2 (s2)
//!         -> mid1 -> cross-attn(U) -> mid2
//!         -> up1(cat s2) -> upsample -> up2(cat s1) -> out
//! ```

use genvit_autograd::{Graph, Mask, Scalar, Tensor, Var};

use super::config::ModelConfig;
use super::nn::{self, Init};
use super::vae::conv;

fn init_res(init: &mut Init<'_>, name: &str, cin: usize, cout: usize, tdim: usize) {
    init.layer_norm(&format!("{name}/ln1"), cin);
    init.conv(&format!("{name}/conv1"), 3, cin, cout, 1.0);
    init.linear(&format!("{name}/temb"), tdim, cout);
    init.layer_norm(&format!("{name}/ln2"), cout);
    init.conv(&format!("{name}/conv2"), 3, cout, cout, 0.5);
    if cin != cout {
        init.conv(&format!("{name}/skip"), 1, cin, cout, 1.0);
    }
}

pub fn init_unet(init: &mut Init<'_>, c: &ModelConfig) {
    let (ch, td) = (c.unet_channels, c.time_dim);
    let mid_tokens = (c.latent_side() / 2).pow(2);
    init.linear("unet/time/fc1", ch, td);
    init.linear("unet/time/fc2", td, td);
    init.conv("unet/conv_in", 3, c.latent_channels, ch, 1.0);
    init_res(init, "unet/down1", ch, ch, td);
    init.conv("unet/downsample", 3, ch, 2 * ch, 1.0);
    init_res(init, "unet/down2", 2 * ch, 2 * ch, td);
    init_res(init, "unet/mid1", 2 * ch, 2 * ch, td);
    init.layer_norm("unet/xattn/ln", 2 * ch);
    init.normal("unet/xattn/pos", &[mid_tokens, 2 * ch], 0.1);
    init.attention("unet/xattn", 2 * ch, c.d_u, 2 * ch, 1.0);
    init_res(init, "unet/mid2", 2 * ch, 2 * ch, td);
    init_res(init, "unet/up1", 4 * ch, 2 * ch, td);
    init_res(init, "unet/up2", 3 * ch, ch, td);
    init.layer_norm("unet/out_ln", ch);
    init.conv("unet/conv_out", 3, ch, c.latent_channels, 0.1);
}

/// Sinusoidal embedding of integer timesteps: `[B, dim]`.
pub fn timestep_embedding<S: Scalar>(ts: &[usize], dim: usize) -> Tensor<S> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((t as f64 * f).sin()));
        }
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push(S::from_f64((t as f64 * f).cos()));
        }
    }
    Tensor::new(&[ts.len(), dim], data)
}

fn res_block<S: Scalar>(g: &mut Graph<'_, S>, x: Var, temb: Var, name: &str) -> Var {
    let b = g.shape(x)[0];
    let h = nn::layer_norm(g, x, &format!("{name}/ln1"));
    let h = g.silu(h);
    let h = conv(g, h, &format!("{name}/conv1"), 3, 1);
    let cout = *g.shape(h).last().unwrap();
    let t = nn::linear(g, temb, &format!("{name}/temb"));
    let t = g.reshape(t, &[b, 1, 1, cout]);
    let h = g.add(h, t);
    let h = nn::layer_norm(g, h, &format!("{name}/ln2"));
    let h = g.silu(h);
    let h = conv(g, h, &format!("{name}/conv2"), 3, 1);
    let skip_name = format!("{name}/skip");
    let skip = if g.has_param(&format!("{skip_name}/w")) { conv(g, x, &skip_name, 1, 1) } else { x };
    g.add(skip, h)
}

/// Single-head `softmax(Q Kᵀ / sqrt(d)) V` from latent tokens to the condition rows, with a residual.
pub fn cross_attention<S: Scalar>(g: &mut Graph<'_, S>, x: Var, cond: Var) -> Var {
    let s = g.shape(x).to_vec();
    let (b, h, w, ch) = (s[0], s[1], s[2], s[3]);
    let tokens = g.reshape(x, &[b, h * w, ch]);
    let q_in = nn::layer_norm(g, tokens, "unet/xattn/ln");
    let pos = g.param("unet/xattn/pos");
    let q_in = g.add(q_in, pos);
    let o = nn::attention(g, q_in, cond, "unet/xattn", 1, Mask::None);
    let out = g.add(tokens, o);
    g.reshape(out, &[b, h, w, ch])
}

/// `eps_hat` for latents `z_t` `[B, s, s, C]` at timesteps `ts` under conditions `[B, L, d_u]`.
pub fn unet_predict<S: Scalar>(g: &mut Graph<'_, S>, z: Var, ts: &[usize], cond: Var, c: &ModelConfig) -> Var {
    let temb = g.constant(timestep_embedding(ts, c.unet_channels));
    let temb = nn::linear(g, temb, "unet/time/fc1");
    let temb = g.silu(temb);
    let temb = nn::linear(g, temb, "unet/time/fc2");
    let temb = g.silu(temb);

    let x = conv(g, z, "unet/conv_in", 3, 1);
    let s1 = res_block(g, x, temb, "unet/down1");
    let x = conv(g, s1, "unet/downsample", 3, 2);
    let s2 = res_block(g, x, temb, "unet/down2");
    let x = res_block(g, s2, temb, "unet/mid1");
    let x = cross_attention(g, x, cond);
    let x = res_block(g, x, temb, "unet/mid2");
    let x = g.concat(&[x, s2], 3);
    let x = res_block(g, x, temb, "unet/up1");
    let x = g.upsample2x(x);
    let x = g.concat(&[x, s1], 3);
    let x = res_block(g, x, temb, "unet/up2");
    let x = nn::layer_norm(g, x, "unet/out_ln");
    let x = g.silu(x);
    conv(g, x, "unet/conv_out", 3, 1)
}
