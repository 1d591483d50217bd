mod common;

use std::collections::HashSet;
use std::fs;

use common::{tiny_spec, Fixture};
use genvit_core::data::dataset::validate_record;
use genvit_core::data::mixture::largest_remainder;
use genvit_core::data::{
    build_mixture, generate_synthetic_corpus, held_out_captions, read_corpus, read_dataset, write_corpus, write_dataset,
    Family, MixtureConfig, RawSourceRecord, Role, Task,
};
use genvit_core::tokenizer::Vocabulary;
use genvit_core::Error;
use proptest::prelude::*;

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn thousand_record_mix_hits_largest_remainder_counts() {
    let fx = Fixture::new(41);
    let mix = MixtureConfig { max_tokens: 96, ..MixtureConfig::reference(1000, 41) };
    let ds = build_mixture(&fx.corpus.records, &mix, &fx.vocab, 4).unwrap();
    let counts: Vec<usize> =
        [Family::NaturalLanguage, Family::Editing, Family::Generation, Family::Understanding].iter().map(|f| ds.counts[f]).collect();
    assert_eq!(counts, vec![19, 96, 269, 616]);
    assert_eq!(ds.records.len(), 1000);
}

#[test]
fn every_record_is_valid_and_unique() {
    let fx = Fixture::new(42);
    let mut ids = HashSet::new();
    for r in &fx.dataset.records {
        validate_record(r, &fx.vocab, 4, 96).unwrap();
        assert!(ids.insert(r.record_id.clone()), "duplicate {}", r.record_id);
        assert_eq!(r.task.generates(), r.target_image.is_some());
        if r.task.generates() {
            assert_eq!(r.tokens.img_positions.len(), 4);
        }
    }
}

#[test]
fn user_turns_carry_no_loss() {
    let fx = Fixture::new(43);
    let sp = fx.vocab.specials;
    let user = fx.vocab.id("user:");
    let assistant = fx.vocab.id("assistant:");
    for r in &fx.dataset.records {
        let mut in_user = false;
        for (k, &t) in r.tokens.ids.iter().enumerate() {
            if t == user {
                in_user = true;
            } else if t == assistant {
                in_user = false;
            }
            if in_user || t == sp.bos {
                assert!(!r.tokens.loss_mask[k], "{} position {k}", r.record_id);
            }
        }
        assert!(r.tokens.loss_mask.iter().any(|&m| m), "{}", r.record_id);
    }
}

#[test]
fn dataset_round_trips_and_rewrites_identically() {
    let fx = Fixture::new(44);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_dataset(a.path(), &fx.dataset, &fx.vocab, &fx.corpus.images, true).unwrap();
    let back = read_dataset(a.path()).unwrap();
    assert_eq!(back.records, fx.dataset.records);
    assert_eq!(back.vocab, fx.vocab);
    assert!(back.manifest.held_out);
    write_dataset(b.path(), &Fixture::new(44).dataset, &fx.vocab, &fx.corpus.images, true).unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
}

#[test]
fn corpus_round_trips() {
    let fx = Fixture::new(45);
    let d = tempfile::tempdir().unwrap();
    write_corpus(d.path(), &fx.corpus).unwrap();
    let back = read_corpus(d.path()).unwrap();
    assert_eq!(back.records, fx.corpus.records);
    assert_eq!(back.images.captions, fx.corpus.images.captions);
    for (id, img) in &fx.corpus.images.images {
        assert_eq!(back.images.images[id], img.quantized());
    }
}

#[test]
fn corrupted_record_is_a_schema_error() {
    let fx = Fixture::new(46);
    let d = tempfile::tempdir().unwrap();
    write_dataset(d.path(), &fx.dataset, &fx.vocab, &fx.corpus.images, false).unwrap();
    let path = d.path().join("dataset.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().find(|l| l.contains("\"t2i\"")).unwrap();
    let broken = first.replacen("[IMG]", "circle", 1);
    assert_ne!(first, broken);
    fs::write(&path, text.replacen(first, &broken, 1)).unwrap();
    assert!(matches!(read_dataset(d.path()), Err(Error::Schema { .. })));
}

#[test]
fn inconsistent_source_refs_are_rejected() {
    let fx = Fixture::new(47);
    let bad = RawSourceRecord {
        family: Family::Generation,
        text_turns: vec![(Role::User, "draw".into()), (Role::Assistant, "ok".into())],
        input_image_ref: None,
        target_image_ref: None,
    };
    let mix = MixtureConfig::reference(10, 0);
    assert!(matches!(build_mixture(&[bad], &mix, &fx.vocab, 4), Err(Error::Input(_))));
}

#[test]
fn bad_ratios_are_a_config_error() {
    let fx = Fixture::new(48);
    let mut mix = MixtureConfig::reference(10, 0);
    mix.ratios.insert(Family::Editing, 0.5);
    assert!(matches!(build_mixture(&fx.corpus.records, &mix, &fx.vocab, 4), Err(Error::Config(_))));
}

#[test]
fn held_out_renders_are_not_training_images() {
    let corpus = generate_synthetic_corpus(&tiny_spec(), 49).unwrap();
    let train: HashSet<Vec<u8>> = corpus.images.images.values().map(|i| i.to_bytes()).collect();
    let held = held_out_captions(&tiny_spec(), 49, 16).unwrap();
    let unseen = held.iter().filter(|(_, img)| !train.contains(&img.to_bytes())).count();
    assert!(unseen > 0);
}

#[test]
fn task_tokens_match_families() {
    let fx = Fixture::new(50);
    let sp = fx.vocab.specials;
    for r in &fx.dataset.records {
        let ids = &r.tokens.ids;
        assert_eq!(ids[0], sp.bos);
        match r.task {
            Task::T2i | Task::Edit => assert_eq!(ids[1], sp.t2i),
            Task::I2t | Task::TextOnly => assert_eq!(ids[1], sp.i2t),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn largest_remainder_sums_and_stays_within_one(total in 1usize..200_000, raw in prop::collection::vec(0.0f64..1.0, 1..6)) {
        let s: f64 = raw.iter().sum();
        prop_assume!(s > 1e-6);
        let ratios: Vec<f64> = raw.iter().map(|r| r / s).collect();
        let counts = largest_remainder(total, &ratios);
        prop_assert_eq!(counts.iter().sum::<usize>(), total);
        for (c, r) in counts.iter().zip(&ratios) {
            prop_assert!((*c as f64 - r * total as f64).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn encode_decode_round_trips(words in prop::collection::vec(prop::sample::select(vec!["red", "circle", "a", "the", "blue", "square"]), 0..12)) {
        let v = Vocabulary::build(&["a red circle the blue square"], 64).unwrap();
        let text = words.join(" ");
        let seq = v.encode(&text);
        prop_assert_eq!(v.decode(&seq).unwrap(), text);
    }
}
