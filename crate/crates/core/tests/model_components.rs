use genvit_autograd::{Graph, Tensor};
use genvit_core::image::ImageTensor;
use genvit_core::model::diffusion::{self, add_noise, sample_latents, DiffusionDraws, NULL_COND};
use genvit_core::model::lm::{self, KvCache, LmInput};
use genvit_core::model::nn::scaled_dot_attention;
use genvit_core::model::{head, unet, vae, vision, Guidance, Model, ModelConfig, NoiseSchedule, SamplerConfig};
use genvit_core::rng;
use genvit_core::tokenizer::SpecialTokens;
use genvit_core::Error;

fn tiny() -> Model {
    Model::init(ModelConfig::tiny(), 3).unwrap()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn identical_keys_average_values() {
    let q = Tensor::<f64>::new(&[1, 2], vec![1.0, 0.0]);
    let k = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]);
    let v = Tensor::new(&[2, 1], vec![2.0, 4.0]);
    assert!((scaled_dot_attention(&q, &k, &v).item() - 3.0).abs() < 1e-12);
}

#[test]
fn single_key_returns_its_value() {
    let q = Tensor::<f64>::new(&[2, 2], vec![0.3, -2.0, 5.0, 1.0]);
    let k = Tensor::new(&[1, 2], vec![0.7, 0.1]);
    let v = Tensor::new(&[1, 3], vec![1.5, -2.5, 0.25]);
    let o = scaled_dot_attention(&q, &k, &v);
    for r in 0..2 {
        assert_eq!(&o.data()[r * 3..r * 3 + 3], v.data());
    }
}

#[test]
fn attention_matches_hand_formula() {
    let q = [[0.2, -0.5], [1.1, 0.3], [-0.7, 0.9]];
    let k = [[0.5, 0.1], [-0.3, 0.8], [0.9, -0.4]];
    let v = [[1.0, 2.0], [-1.0, 0.5], [0.3, -0.2]];
    let t = |m: &[[f64; 2]; 3]| Tensor::<f64>::new(&[3, 2], m.iter().flatten().copied().collect());
    let o = scaled_dot_attention(&t(&q), &t(&k), &t(&v));
    for i in 0..3 {
        let s: Vec<f64> = (0..3).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum();
        let w: Vec<f64> = s.iter().map(|x| x.exp() / z).collect();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for d in 0..2 {
            let want: f64 = (0..3).map(|j| w[j] * v[j][d]).sum();
            assert!((o.data()[i * 2 + d] - want).abs() < 1e-6);
        }
    }
}

#[test]
fn projector_matches_hand_oracle() {
    let mut m = tiny();
    let c = m.config.clone();
    let (dv, dl) = (c.d_vis, c.d_lm);
    let w1: Vec<f32> = (0..dv * dl).map(|i| ((i % 7) as f32 - 3.0) * 0.05).collect();
    let b1: Vec<f32> = (0..dl).map(|i| (i as f32) * 0.01).collect();
    let w2: Vec<f32> = (0..dl * dl).map(|i| ((i % 5) as f32 - 2.0) * 0.04).collect();
    let b2: Vec<f32> = (0..dl).map(|i| -(i as f32) * 0.02).collect();
    *m.params.get_mut("projector/fc1/w").unwrap() = Tensor::new(&[dv, dl], w1.clone());
    *m.params.get_mut("projector/fc1/b").unwrap() = Tensor::new(&[dl], b1.clone());
    *m.params.get_mut("projector/fc2/w").unwrap() = Tensor::new(&[dl, dl], w2.clone());
    *m.params.get_mut("projector/fc2/b").unwrap() = Tensor::new(&[dl], b2.clone());
    let x: Vec<f64> = (0..dv).map(|i| (i as f64 * 0.37).sin()).collect();

    let p64 = m.params.cast::<f64>();
    let mut g = Graph::new(&p64).no_grad();
    let xv = g.constant(Tensor::new(&[1, dv], x.clone()));
    let y = vision::project(&mut g, xv);
    let got = g.value(y).data().to_vec();

    let h: Vec<f64> = (0..dl)
        .map(|j| gelu(b1[j] as f64 + (0..dv).map(|i| x[i] * w1[i * dl + j] as f64).sum::<f64>()))
        .collect();
    for j in 0..dl {
        let want = b2[j] as f64 + (0..dl).map(|i| h[i] * w2[i * dl + j] as f64).sum::<f64>();
        assert!((got[j] - want).abs() < 1e-9, "{j}: {} vs {want}", got[j]);
    }
}

#[test]
fn lm_is_causal_and_cache_matches_full_forward() {
    let m = tiny();
    let c = &m.config;
    let sp = SpecialTokens::FIXED;
    let ids: Vec<usize> = vec![0, 4, 12, 20, 7, 7, 33, 1];
    let mut ids2 = ids.clone();
    ids2[5] = 40;

    let logits = |ids: &[usize]| {
        let mut g = Graph::new(&m.params).no_grad();
        let (out, _) = lm::lm_forward(&mut g, &[LmInput { visual: None, ids }], &sp, c).unwrap();
        g.value(out.logits).clone()
    };
    let a = logits(&ids);
    let b = logits(&ids2);
    let v = c.vocab_size;
    assert_eq!(&a.data()[..5 * v], &b.data()[..5 * v]);
    assert_ne!(&a.data()[5 * v..6 * v], &b.data()[5 * v..6 * v]);

    let mut cache = KvCache::new(c);
    let mut incremental = Vec::new();
    for (k, chunk) in [&ids[..3], &ids[3..4], &ids[4..]].iter().enumerate() {
        let start = [0, 3, 4][k];
        let mut g = Graph::new(&m.params).no_grad();
        let slots = lm::img_slots(chunk, &sp, c.n_img, ids[..start].iter().filter(|&&t| t == sp.img).count());
        let x = lm::embed_tokens(&mut g, chunk, &slots, c);
        let wpe = g.param("lm/wpe");
        let pos = g.narrow(wpe, 0, start, chunk.len());
        let x = g.add(x, pos);
        let x = g.reshape(x, &[1, chunk.len(), c.d_lm]);
        let out = lm::lm_blocks(&mut g, x, c, Some(&mut cache));
        incremental.extend_from_slice(g.value(out.logits).data());
    }
    assert_eq!(cache.len, ids.len());
    for (x, y) in incremental.iter().zip(a.data()) {
        assert!((x - y).abs() < 1e-4, "{x} vs {y}");
    }
}

#[test]
fn component_shapes() {
    let m = tiny();
    let c = &m.config;
    let img = ImageTensor::filled(c.image_size, c.image_size, [0.2, 0.5, 0.9]);
    let mut g = Graph::new(&m.params).no_grad();
    let p = g.constant(vision::patchify::<f32>(&[&img, &img], c).unwrap());
    let out = vision::vision_forward(&mut g, p, c, true);
    assert_eq!(g.shape(out.penultimate), &[2, c.n_patches(), c.d_vis]);
    assert_eq!(g.shape(out.pooled.unwrap()), &[2, c.d_vis]);
    let proj = vision::project(&mut g, out.penultimate);
    assert_eq!(g.shape(proj), &[2, c.n_patches(), c.d_lm]);

    let feats = g.constant(Tensor::zeros(&[3, c.n_img, c.d_lm]));
    let u = head::head_forward(&mut g, feats, c);
    assert_eq!(g.shape(u), &[3, c.n_queries, c.d_u]);

    let latents = vae::vae_encode(&m.params, &[&img], c).unwrap();
    assert_eq!(latents[0].shape(), &[c.latent_side(), c.latent_side(), c.latent_channels]);
    let back = vae::vae_decode(&m.params, &latents, c);
    assert_eq!((back[0].height, back[0].width), (c.image_size, c.image_size));
    assert!(back[0].pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));

    let s = c.latent_side();
    let z = g.constant(Tensor::zeros(&[1, s, s, c.latent_channels]));
    let cond = g.constant(Tensor::zeros(&[1, c.n_queries, c.d_u]));
    let e = unet::unet_predict(&mut g, z, &[5], cond, c);
    assert_eq!(g.shape(e), &[1, s, s, c.latent_channels]);
}

#[test]
fn image_size_mismatch_is_an_input_error() {
    let c = ModelConfig::tiny();
    let img = ImageTensor::filled(8, 8, [0.0; 3]);
    assert!(matches!(vision::patchify::<f32>(&[&img], &c), Err(Error::Input(_))));
}

#[test]
fn zero_weight_decoder_gives_constant_image() {
    let mut m = tiny();
    for name in ["vae/dec1/w", "vae/dec2/w", "vae/dec_out/w"] {
        let t = m.params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let c = &m.config;
    let mut r = rng::stream(0, "t", 0);
    let z = diffusion::standard_normal(&mut r, &[c.latent_side(), c.latent_side(), c.latent_channels]);
    let img = &vae::vae_decode(&m.params, &[z], c)[0];
    let first = img.get(0, 0);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.get(y, x);
            for ch in 0..3 {
                assert_eq!(p[ch], img.get(y % 4, x % 4)[ch]);
            }
        }
    }
    assert!(first.iter().all(|v| v.is_finite()));
}

#[test]
fn unet_output_depends_on_condition() {
    let m = tiny();
    let c = &m.config;
    let s = c.latent_side();
    let mut r = rng::stream(1, "t", 0);
    let z = diffusion::standard_normal(&mut r, &[1, s, s, c.latent_channels]);
    let u1 = diffusion::standard_normal(&mut r, &[1, c.n_queries, c.d_u]);
    let u2 = diffusion::standard_normal(&mut r, &[1, c.n_queries, c.d_u]);
    let run = |u: &Tensor<f32>| {
        let mut g = Graph::new(&m.params).no_grad();
        let zv = g.constant(z.clone());
        let uv = g.constant(u.clone());
        let e = unet::unet_predict(&mut g, zv, &[7], uv, c);
        g.value(e).clone()
    };
    assert_ne!(run(&u1).data(), run(&u2).data());
}

#[test]
fn head_queries_attend_causally() {
    let m = tiny();
    let c = &m.config;
    let mut r = rng::stream(2, "t", 0);
    let feats = diffusion::standard_normal(&mut r, &[1, c.n_img, c.d_lm]);
    let run = |params: &genvit_autograd::ParamStore<f32>| {
        let mut g = Graph::new(params).no_grad();
        let f = g.constant(feats.clone());
        let u = head::head_forward(&mut g, f, c);
        g.value(u).clone()
    };
    let base = run(&m.params);
    let mut p2 = m.params.clone();
    let q = p2.get_mut("gen_head/queries").unwrap();
    let last = c.n_queries - 1;
    for d in 0..c.head_dim {
        q.data_mut()[last * c.head_dim + d] += 1.0;
    }
    let moved = run(&p2);
    let du = c.d_u;
    assert_eq!(&base.data()[..last * du], &moved.data()[..last * du]);
    assert_ne!(&base.data()[last * du..], &moved.data()[last * du..]);
}

#[test]
fn schedule_values() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.02);
    assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-12);
    assert_eq!(s.alpha_bar(0), 1.0);
    for t in 1..=200 {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.betas[t - 1] > 0.0 && s.betas[t - 1] < 1.0);
    }
    let prod: f64 = (0..200).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).product();
    assert!((s.alpha_bar(200) - prod).abs() < 1e-12);
}

#[test]
fn add_noise_matches_product_form() {
    let s = NoiseSchedule::linear(200, 1e-4, 0.02);
    let mut r = rng::stream(4, "t", 0);
    let o = diffusion::standard_normal(&mut r, &[4, 4, 2]);
    let e = diffusion::standard_normal(&mut r, &[4, 4, 2]);
    assert_eq!(add_noise(&o, 0, &e, &s).unwrap(), o);
    for t in [1, 50, 200] {
        let ab: f64 = (0..t).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 199.0)).product();
        let z = add_noise(&o, t, &e, &s).unwrap();
        for ((zv, ov), ev) in z.data().iter().zip(o.data()).zip(e.data()) {
            let want = ab.sqrt() * *ov as f64 + (1.0 - ab).sqrt() * *ev as f64;
            assert!((*zv as f64 - want).abs() < 1e-6);
        }
    }
    assert!(matches!(add_noise(&o, 201, &e, &s), Err(Error::Input(_))));
}

#[test]
fn diffusion_loss_replays_per_example() {
    let m = tiny();
    let c = &m.config;
    let sched = NoiseSchedule::from_config(c);
    let s = c.latent_side();
    let mut r = rng::stream(5, "t", 0);
    let lat: Vec<Tensor<f32>> = (0..2).map(|_| diffusion::standard_normal(&mut r, &[s, s, c.latent_channels])).collect();
    let cond = diffusion::standard_normal(&mut r, &[2, c.n_queries, c.d_u]);
    let draws = DiffusionDraws::sample(&mut rng::stream(9, "d", 0), 2, &[s, s, c.latent_channels], sched.steps(), 0.0);

    let mut g = Graph::new(&m.params).no_grad();
    let cv = g.constant(cond.clone());
    let l = diffusion::diffusion_loss(&mut g, &[&lat[0], &lat[1]], cv, &draws, &sched, c).unwrap();
    let batch = g.value(l).item() as f64;

    let mut manual = 0.0;
    for i in 0..2 {
        let z = add_noise(&lat[i], draws.t[i], &draws.eps[i], &sched).unwrap();
        let mut g = Graph::new(&m.params).no_grad();
        let zv = g.constant(z.reshape(&[1, s, s, c.latent_channels]));
        let cv = g.constant(cond.narrow(0, i, 1));
        let e = unet::unet_predict(&mut g, zv, &[draws.t[i]], cv, c);
        let pred = g.value(e);
        let se: f64 = pred.data().iter().zip(draws.eps[i].data()).map(|(p, e)| ((p - e) as f64).powi(2)).sum();
        manual += se / pred.numel() as f64;
    }
    manual /= 2.0;
    assert!((batch - manual).abs() < 1e-5 * manual.max(1.0), "{batch} vs {manual}");

    let mut g = Graph::new(&m.params).no_grad();
    let cv = g.constant(cond);
    assert!(matches!(diffusion::diffusion_loss(&mut g, &[], cv, &draws, &sched, c), Err(Error::Input(_))));
}

#[test]
fn cfg_identities_are_bitwise() {
    let m = tiny();
    let c = &m.config;
    let mut r = rng::stream(6, "t", 0);
    let cond = diffusion::standard_normal(&mut r, &[2, c.n_queries, c.d_u]);
    let cfg = SamplerConfig { guidance_scale: 1.0, sample_steps: 10, seed: 11 };
    let run = |g: Guidance| sample_latents(&m.params, &cond, g, &cfg, 0, c).unwrap();
    assert_eq!(run(Guidance::Cfg(1.0)), run(Guidance::CondOnly));
    assert_eq!(run(Guidance::Cfg(0.0)), run(Guidance::UncondOnly));
    assert_eq!(run(Guidance::Cfg(3.0)), run(Guidance::Cfg(3.0)));
    assert_ne!(run(Guidance::Cfg(3.0)), run(Guidance::CondOnly));

    let mut no_null = m.params.clone();
    no_null.remove(NULL_COND);
    let err = sample_latents(&no_null, &cond, Guidance::Cfg(3.0), &cfg, 0, c).unwrap_err();
    assert!(matches!(err, Error::ModelState(_)));
}

#[test]
fn model_archive_round_trip() {
    let m = tiny();
    let bytes = m.to_archive().to_bytes();
    let back = Model::from_archive(genvit_autograd::Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(back.params, m.params);
}

#[test]
fn strided_timesteps_cover_range() {
    let ts = diffusion::sample_timesteps(50, 200);
    assert_eq!(ts.len(), 50);
    assert_eq!((ts[0], ts[49]), (200, 1));
    assert!(ts.windows(2).all(|w| w[0] > w[1]));
}
