mod common;

use common::Fixture;
use genvit_core::infer::{
    count_blocks, decode, edit_image, generate_image, generation_prompt, parse_prompt, respond, DecodeConfig, Route,
    TaskToken,
};
use genvit_core::model::SamplerConfig;
use genvit_core::Error;

fn sampler() -> SamplerConfig {
    SamplerConfig { sample_steps: 5, ..SamplerConfig::default() }
}

fn sampling(seed: u64) -> DecodeConfig {
    DecodeConfig { temperature: 1.0, top_k: 0, seed, max_new_tokens: 24, ..DecodeConfig::default() }
}

#[test]
fn prompts_route_on_their_leading_task_token() {
    assert_eq!(parse_prompt("[T2I] draw a red circle").unwrap(), (TaskToken::T2i, "draw a red circle".into()));
    let (t, rest) = parse_prompt("  [I2T] <IMAGE> what color is it?").unwrap();
    assert_eq!(t, TaskToken::I2t);
    assert!(!rest.contains("<IMAGE>"));
}

#[test]
fn prompt_without_task_token_is_a_routing_error() {
    for p in ["draw a red circle", "", "T2I draw", "please [T2I] draw"] {
        assert!(matches!(parse_prompt(p), Err(Error::Routing(_))), "{p:?}");
    }
}

#[test]
fn text_to_image_yields_exactly_one_block_and_an_image() {
    let fx = Fixture::new(21);
    let n = fx.model.config.n_img;
    for seed in 0..8 {
        let r = respond(&fx.model, &fx.vocab, "[T2I] draw a red circle", None, &sampler(), &sampling(seed)).unwrap();
        assert_eq!(count_blocks(&r.ids, &fx.vocab, n), 1, "{}", r.text);
        assert_eq!(r.route, Route::Image);
        let img = r.image.unwrap();
        assert_eq!((img.height, img.width), (16, 16));
    }
}

#[test]
fn image_to_text_never_emits_block_tokens() {
    let fx = Fixture::new(22);
    let sp = fx.vocab.specials;
    let img = fx.corpus.images.images.values().next().unwrap();
    for seed in 0..8 {
        let r = respond(&fx.model, &fx.vocab, "[I2T] <IMAGE> what color?", Some(img), &sampler(), &sampling(seed)).unwrap();
        assert!(r.ids.iter().all(|&t| t != sp.soi && t != sp.img && t != sp.eoi), "{}", r.text);
        assert_eq!(r.route, Route::Text);
        assert!(r.image.is_none());
    }
}

#[test]
fn block_fits_when_the_budget_is_tight() {
    let fx = Fixture::new(23);
    let n = fx.model.config.n_img;
    let dc = DecodeConfig { max_new_tokens: n + 2, ..sampling(4) };
    let d = decode(&fx.model, &fx.vocab, "[T2I] draw a blue square", None, &dc).unwrap();
    assert_eq!(count_blocks(&d.ids, &fx.vocab, n), 1);
    assert!(d.img_hidden.is_some());
}

#[test]
fn inference_is_deterministic() {
    let fx = Fixture::new(24);
    let a = generate_image(&fx.model, &fx.vocab, "a green triangle", &sampler()).unwrap();
    let b = generate_image(&fx.model, &fx.vocab, "a green triangle", &sampler()).unwrap();
    assert_eq!(a, b);
    let src = fx.corpus.images.images.values().next().unwrap();
    let e1 = edit_image(&fx.model, &fx.vocab, src, "make it blue", &sampler()).unwrap();
    let e2 = edit_image(&fx.model, &fx.vocab, src, "make it blue", &sampler()).unwrap();
    assert_eq!(e1, e2);
}

#[test]
fn empty_caption_still_generates() {
    let fx = Fixture::new(25);
    let img = generate_image(&fx.model, &fx.vocab, "", &sampler()).unwrap();
    assert!(img.pixels.iter().all(|v| v.is_finite()));
    assert!(generation_prompt("").starts_with("[T2I]"));
}

#[test]
fn unconstrained_decoding_can_leave_the_grammar() {
    let fx = Fixture::new(26);
    let n = fx.model.config.n_img;
    let free = DecodeConfig { constrained: false, ..sampling(0) };
    let blocks: Vec<usize> = (0..8)
        .map(|s| {
            let d = decode(&fx.model, &fx.vocab, "[T2I] draw a red circle", None, &DecodeConfig { seed: s, ..free.clone() });
            count_blocks(&d.unwrap().ids, &fx.vocab, n)
        })
        .collect();
    assert!(blocks.iter().any(|&b| b != 1), "{blocks:?}");
}
