//! Shared layers. Parameters live in the store under `<prefix>/w`, `<prefix>/b`
//! (linear) and `<prefix>/g`, `<prefix>/b` (layer norm).

use genvit_autograd::{Graph, Mask, ParamStore, Scalar, Tensor, Var};

use crate::rng::Rng;

/// Parameter initializer writing into a store.
pub struct Init<'a> {
    pub store: &'a mut ParamStore<f32>,
    pub rng: Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, rng: Rng) -> Self {
        Self { store, rng }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) {
        let t = Tensor::randn(shape, std, &mut self.rng);
        self.store.insert(name, t, false);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::zeros(shape), false);
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) {
        self.store.insert(name, Tensor::ones(shape), false);
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        self.linear_scaled(name, din, dout, 1.0);
    }

    pub fn linear_scaled(&mut self, name: &str, din: usize, dout: usize, gain: f64) {
        self.normal(&format!("{name}/w"), &[din, dout], gain / (din as f64).sqrt());
        self.zeros(&format!("{name}/b"), &[dout]);
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) {
        self.ones(&format!("{name}/g"), &[d]);
        self.zeros(&format!("{name}/b"), &[d]);
    }

    /// `3x3`-style conv weight laid out `[k*k*c_in, c_out]`.
    pub fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, gain: f64) {
        let fan_in = k * k * cin;
        self.normal(&format!("{name}/w"), &[fan_in, cout], gain / (fan_in as f64).sqrt());
        self.zeros(&format!("{name}/b"), &[cout]);
    }

    pub fn attention(&mut self, name: &str, d_q: usize, d_kv: usize, d: usize, out_gain: f64) {
        self.linear(&format!("{name}/q"), d_q, d);
        self.linear(&format!("{name}/k"), d_kv, d);
        self.linear(&format!("{name}/v"), d_kv, d);
        self.linear_scaled(&format!("{name}/o"), d, d_q, out_gain);
    }

    pub fn mlp(&mut self, name: &str, d: usize, out_gain: f64) {
        self.linear(&format!("{name}/fc1"), d, 4 * d);
        self.linear_scaled(&format!("{name}/fc2"), 4 * d, d, out_gain);
    }

    /// Pre-norm self-attention block.
    pub fn encoder_block(&mut self, name: &str, d: usize, out_gain: f64) {
        self.layer_norm(&format!("{name}/ln1"), d);
        self.attention(&format!("{name}/attn"), d, d, d, out_gain);
        self.layer_norm(&format!("{name}/ln2"), d);
        self.mlp(&format!("{name}/mlp"), d, out_gain);
    }

    /// Pre-norm block with self-attention, cross-attention to a memory, and MLP.
    pub fn decoder_block(&mut self, name: &str, d: usize, d_mem: usize, out_gain: f64) {
        self.encoder_block(name, d, out_gain);
        self.layer_norm(&format!("{name}/ln_x"), d);
        self.attention(&format!("{name}/xattn"), d, d_mem, d, out_gain);
    }
}

pub fn linear<S: Scalar>(g: &mut Graph<'_, S>, x: Var, name: &str) -> Var {
    let w = g.param(&format!("{name}/w"));
    let b_name = format!("{name}/b");
    let b = if g.has_param(&b_name) { Some(g.param(&b_name)) } else { None };
    g.linear(x, w, b)
}

pub fn layer_norm<S: Scalar>(g: &mut Graph<'_, S>, x: Var, name: &str) -> Var {
    let gamma = g.param(&format!("{name}/g"));
    let beta = g.param(&format!("{name}/b"));
    g.layer_norm(x, gamma, beta)
}

pub fn mlp<S: Scalar>(g: &mut Graph<'_, S>, x: Var, name: &str) -> Var {
    let h = linear(g, x, &format!("{name}/fc1"));
    let h = g.gelu(h);
    linear(g, h, &format!("{name}/fc2"))
}

/// `[b, t, h*dh]` -> `[b*h, t, dh]`.
pub fn split_heads<S: Scalar>(g: &mut Graph<'_, S>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, t, heads, d / heads]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[b * heads, t, d / heads])
}

/// `[b*h, t, dh]` -> `[b, t, h*dh]`.
pub fn merge_heads<S: Scalar>(g: &mut Graph<'_, S>, x: Var, heads: usize) -> Var {
    let s = g.shape(x).to_vec();
    let (bh, t, dh) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[bh / heads, heads, t, dh]);
    let x = g.permute(x, &[0, 2, 1, 3]);
    g.reshape(x, &[bh / heads, t, heads * dh])
}

/// Scaled dot-product attention over already-projected `[b, t, d]` inputs.
pub fn attend<S: Scalar>(g: &mut Graph<'_, S>, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Var {
    let d = *g.shape(q).last().unwrap();
    let (q, k, v) = (split_heads(g, q, heads), split_heads(g, k, heads), split_heads(g, v, heads));
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / ((d / heads) as f64).sqrt());
    let a = g.softmax(s, mask);
    let o = g.matmul(a, v);
    merge_heads(g, o, heads)
}

pub fn attention<S: Scalar>(g: &mut Graph<'_, S>, xq: Var, xkv: Var, name: &str, heads: usize, mask: Mask) -> Var {
    let q = linear(g, xq, &format!("{name}/q"));
    let k = linear(g, xkv, &format!("{name}/k"));
    let v = linear(g, xkv, &format!("{name}/v"));
    let o = attend(g, q, k, v, heads, mask);
    linear(g, o, &format!("{name}/o"))
}

pub fn encoder_block<S: Scalar>(g: &mut Graph<'_, S>, x: Var, name: &str, heads: usize, mask: Mask) -> Var {
    let h = layer_norm(g, x, &format!("{name}/ln1"));
    let h = attention(g, h, h, &format!("{name}/attn"), heads, mask);
    let x = g.add(x, h);
    let h = layer_norm(g, x, &format!("{name}/ln2"));
    let h = mlp(g, h, &format!("{name}/mlp"));
    g.add(x, h)
}

pub fn decoder_block<S: Scalar>(g: &mut Graph<'_, S>, x: Var, mem: Var, name: &str, heads: usize, causal: bool) -> Var {
    let mask = if causal { Mask::Causal { offset: 0 } } else { Mask::None };
    let h = layer_norm(g, x, &format!("{name}/ln1"));
    let h = attention(g, h, h, &format!("{name}/attn"), heads, mask);
    let x = g.add(x, h);
    let h = layer_norm(g, x, &format!("{name}/ln_x"));
    let h = attention(g, h, mem, &format!("{name}/xattn"), heads, Mask::None);
    let x = g.add(x, h);
    let h = layer_norm(g, x, &format!("{name}/ln2"));
    let h = mlp(g, h, &format!("{name}/mlp"));
    g.add(x, h)
}

/// Batch of `[rows, d]` constants stacked into `[n, rows, d]`.
pub fn stack<S: Scalar>(items: &[&Tensor<S>]) -> Tensor<S> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        assert_eq!(t.shape(), items[0].shape(), "stack shape mismatch");
        data.extend_from_slice(t.data());
    }
    Tensor::new(&shape, data)
}

/// `softmax(q kᵀ / sqrt(d_k)) v` on plain 2-D matrices.
pub fn scaled_dot_attention<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Tensor<S> {
    let mut g = Graph::detached();
    let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let dk = *g.shape(k).last().unwrap();
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / (dk as f64).sqrt());
    let a = g.softmax(s, Mask::None);
    let o = g.matmul(a, v);
    g.value(o).clone()
}
