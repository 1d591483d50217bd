mod common;

use common::{tiny_spec, Fixture};
use genvit_core::data::held_out_renders;
use genvit_core::eval::{
    apply_prompt_template, clip_image_embeddings, clip_pair_similarities, clip_text_embeddings, cosine, dino_pair_scores,
    dino_proxy, evaluate, fid, fid_from_stats, image_features, mean_cosine, mean_se, parse_prompt_template,
    uniform_noise_images, EvalConfig, EvalCounts, EvalSet, FeatureSet, Metric, Source, TemplateFamily, REPORT_FILE,
};
use genvit_core::model::SamplerConfig;
use genvit_core::rng;
use genvit_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;

fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, "test/rows", 0);
    (0..n).map(|_| (0..d).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
}

fn set(rows: &[Vec<f64>]) -> FeatureSet {
    FeatureSet::new(rows, Source::Real, "test").unwrap()
}

/// `tr sqrt(M)` for a 2x2 matrix with positive real eigenvalues: `sqrt(tr M + 2 sqrt(det M))`.
fn trace_sqrt_2x2(m: &DMatrix<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    (tr + 2.0 * det.sqrt()).sqrt()
}

fn spd(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    let l = DMatrix::from_row_slice(2, 2, &[a, 0.0, b, c]);
    &l * l.transpose()
}

#[test]
fn fid_of_a_set_with_itself_is_zero() {
    let a = set(&random_rows(50, 6, 1));
    assert!(fid(&a, &a).unwrap().value.abs() < 1e-6);
}

#[test]
fn fid_of_translated_set_is_squared_shift() {
    let rows = random_rows(40, 3, 2);
    let delta = [0.5, -1.25, 2.0];
    let moved: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&delta).map(|(x, d)| x + d).collect()).collect();
    let expected: f64 = delta.iter().map(|d| d * d).sum();
    let v = fid(&set(&rows), &set(&moved)).unwrap().value;
    assert!((v - expected).abs() < 1e-6, "{v}");
}

#[test]
fn fid_closed_form_cases() {
    let i2 = DMatrix::<f64>::identity(2, 2);
    let zero = DVector::zeros(2);
    let shifted = DVector::from_vec(vec![3.0, 4.0]);
    assert!((fid_from_stats(&zero, &i2, &shifted, &i2).unwrap().value - 25.0).abs() < 1e-6);
    let four = &i2 * 4.0;
    let r = fid_from_stats(&zero, &four, &zero, &i2).unwrap();
    assert!((r.value - 2.0).abs() < 1e-6, "{}", r.value);
    assert!(!r.loaded);
}

#[test]
fn rank_deficient_covariance_is_loaded() {
    let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
    let r = fid(&set(&rows), &set(&rows)).unwrap();
    assert!(r.loaded);
    assert!(r.value.abs() < 1e-6, "{}", r.value);
}

#[test]
fn feature_set_rejects_bad_rows() {
    assert!(matches!(FeatureSet::new(&[vec![1.0, 2.0], vec![1.0]], Source::Real, "x"), Err(Error::Input(_))));
    assert!(matches!(FeatureSet::new(&[vec![f64::NAN]], Source::Generated, "x"), Err(Error::Numeric(_))));
    assert!(matches!(set(&[vec![1.0, 2.0]]).stats(), Err(Error::Input(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fid_matches_two_dimensional_closed_form(
        m in prop::array::uniform4(-3.0f64..3.0),
        a in prop::array::uniform3(0.2f64..2.0),
        b in prop::array::uniform3(0.2f64..2.0),
        oa in -1.5f64..1.5,
        ob in -1.5f64..1.5,
    ) {
        let ca = spd(a[0], oa, a[1] + a[2]);
        let cb = spd(b[0], ob, b[1] + b[2]);
        let ma = DVector::from_vec(vec![m[0], m[1]]);
        let mb = DVector::from_vec(vec![m[2], m[3]]);
        let expected = (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * trace_sqrt_2x2(&(&ca * &cb));
        let v = fid_from_stats(&ma, &ca, &mb, &cb).unwrap().value;
        prop_assert!((v - expected.max(0.0)).abs() < 1e-6 * (1.0 + expected.abs()), "{} vs {}", v, expected);
    }

    #[test]
    fn fid_is_symmetric_and_nonnegative(s1 in 0u64..1000, s2 in 0u64..1000, n in 8usize..30, d in 1usize..5) {
        let a = set(&random_rows(n, d, s1));
        let b = set(&random_rows(n + 3, d, s2 + 5000));
        let ab = fid(&a, &b).unwrap().value;
        let ba = fid(&b, &a).unwrap().value;
        prop_assert!((ab - ba).abs() < 1e-6);
        prop_assert!(ab >= 0.0);
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let c = cosine(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn template_slots_round_trip(words in prop::collection::vec("[a-z]{1,8}", 1..6), fam in 0usize..5) {
        let family = TemplateFamily::ALL[fam];
        let text = words.join(" ");
        let options: Vec<String> = words.iter().take(2).cloned().collect();
        let prompt = apply_prompt_template(family, Some(&text), Some(&options), Some(&text)).unwrap();
        prop_assert_eq!(&prompt, &apply_prompt_template(family, Some(&text), Some(&options), Some(&text)).unwrap());
        let slots = parse_prompt_template(family, &prompt).unwrap();
        match family {
            TemplateFamily::Generation | TemplateFamily::Editing => prop_assert_eq!(slots.description.as_deref(), Some(text.as_str())),
            TemplateFamily::LongVqa => {
                prop_assert_eq!(slots.question.as_deref(), Some(text.as_str()));
                prop_assert_eq!(slots.options.as_ref(), Some(&options));
            }
            _ => prop_assert_eq!(slots.question.as_deref(), Some(text.as_str())),
        }
    }
}

#[test]
fn cosine_examples() {
    assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap().abs() < 1e-12);
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    let a = vec![vec![1.0, 2.0, 2.0], vec![0.0, 1.0, 0.0], vec![3.0, 0.0, 4.0]];
    let b = vec![vec![2.0, 1.0, 2.0], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let hand = (8.0 / 9.0 + 1.0 / 2f64.sqrt() + 4.0 / 5.0) / 3.0;
    assert!((mean_cosine(&a, &b).unwrap() - hand).abs() < 1e-6);
}

#[test]
fn mean_and_standard_error() {
    let (m, se) = mean_se(&[1.0, 2.0, 3.0, 4.0]);
    assert!((m - 2.5).abs() < 1e-12);
    assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    assert!(mean_se(&[1.0]).1.is_infinite());
}

#[test]
fn apply_template_generation_example() {
    let p = apply_prompt_template(TemplateFamily::Generation, None, None, Some("a red circle")).unwrap();
    assert!(p.starts_with("[T2I]") && p.contains("a red circle"));
    assert!(matches!(apply_prompt_template(TemplateFamily::ShortVqa, None, None, None), Err(Error::Template(_))));
}

#[test]
fn model_scores_match_direct_cosines() {
    let fx = Fixture::new(31);
    let imgs: Vec<_> = fx.corpus.images.images.values().take(3).collect();
    let caps: Vec<&str> = fx.corpus.images.captions.values().take(3).map(|s| s.as_str()).collect();
    let ie = clip_image_embeddings(&fx.model, &imgs).unwrap();
    let te = clip_text_embeddings(&fx.model, &caps, &fx.vocab).unwrap();
    let sims = clip_pair_similarities(&fx.model, &imgs, &caps, &fx.vocab).unwrap();
    for i in 0..3 {
        assert!((sims[i] - cosine(&ie[i], &te[i]).unwrap()).abs() < 1e-6);
    }

    let other: Vec<_> = fx.corpus.images.images.values().skip(3).take(3).collect();
    let f = image_features(&fx.model, &imgs).unwrap();
    let g = image_features(&fx.model, &other).unwrap();
    let scores = dino_pair_scores(&fx.model, &imgs, &other).unwrap();
    for i in 0..3 {
        assert!((scores[i] - cosine(&f[i], &g[i]).unwrap()).abs() < 1e-6);
    }
    assert!((dino_proxy(&fx.model, &imgs, &imgs).unwrap() - 1.0).abs() < 1e-6);
    assert!(dino_proxy(&fx.model, &imgs, &imgs).unwrap() >= dino_proxy(&fx.model, &other, &imgs).unwrap());
}

#[test]
fn real_halves_are_closer_than_noise() {
    let fx = Fixture::new(32);
    let spec = tiny_spec();
    let real = held_out_renders(&spec, 0, 160).unwrap();
    let noise = uniform_noise_images(80, spec.canvas, 0);
    let feats = |v: &[genvit_core::image::ImageTensor]| {
        let refs: Vec<_> = v.iter().collect();
        set(&image_features(&fx.model, &refs).unwrap())
    };
    let a = feats(&real[..80]);
    let b = feats(&real[80..]);
    let n = feats(&noise);
    let halves = fid(&a, &b).unwrap().value;
    let vs_noise = fid(&a, &n).unwrap().value;
    assert!(halves < vs_noise, "{halves} vs {vs_noise}");
}

fn small_set() -> EvalSet {
    EvalSet::synthetic(&tiny_spec(), 5, EvalCounts { captions: 6, edits: 4, vqa: 4, real: 24 }).unwrap()
}

fn fast_eval() -> EvalConfig {
    EvalConfig { sampler: SamplerConfig { sample_steps: 4, ..SamplerConfig::default() }, ..EvalConfig::default() }
}

#[test]
fn evaluation_report_is_reproducible() {
    let fx = Fixture::new(33);
    let set = small_set();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = evaluate(&fx.model, &fx.vocab, &set, &Metric::ALL, &fast_eval(), Some(a.path())).unwrap();
    let rb = evaluate(&fx.model, &fx.vocab, &set, &Metric::ALL, &fast_eval(), Some(b.path())).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(std::fs::read(a.path().join(REPORT_FILE)).unwrap(), std::fs::read(b.path().join(REPORT_FILE)).unwrap());
    for name in ["fid", "fid_noise", "clip_similarity", "clip_similarity_shuffled", "dino_proxy", "vqa_exact_match"] {
        assert!(ra.value(name).unwrap().is_finite(), "{name}");
    }
    let images = std::fs::read_dir(a.path().join("images")).unwrap().count();
    assert_eq!(images, 6 * 2 + 4);
}

#[test]
fn metric_without_ground_truth_is_a_config_error() {
    let fx = Fixture::new(34);
    let set = EvalSet { edits: Vec::new(), ..small_set() };
    let err = evaluate(&fx.model, &fx.vocab, &set, &[Metric::DinoProxy], &fast_eval(), None).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn evaluation_needs_the_frozen_encoders() {
    let fx = Fixture::new(35);
    let mut model = fx.model.clone();
    let names: Vec<String> = model.params.iter().filter(|(n, _)| n.starts_with("clip/")).map(|(n, _)| n.to_string()).collect();
    for n in names {
        model.params.remove(&n);
    }
    assert!(evaluate(&model, &fx.vocab, &small_set(), &[Metric::Fid], &fast_eval(), None).is_err());
}
