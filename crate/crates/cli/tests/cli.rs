use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
corpus.canvas=16
corpus.n_generation=30
corpus.n_understanding=30
corpus.n_editing=12
corpus.n_natural_language=6
data.total=80
data.max_tokens=96
model.n_img=4
model.patch=8
model.d_vis=16
model.vis_layers=2
model.vis_heads=2
model.d_lm=16
model.n_layers=1
model.n_heads=2
model.context_len=96
model.head_dim=16
model.head_heads=2
model.head_enc_layers=1
model.head_dec_layers=1
model.n_queries=4
model.d_u=8
model.text_layers=1
model.text_heads=2
model.clip_dim=8
model.vae_channels=8
model.latent_channels=2
model.unet_channels=8
model.time_dim=8
model.diffusion_steps=20
sampler.sample_steps=4
eval.captions=6
eval.edits=4
eval.vqa=4
eval.real=24
gradcheck.per_component=20
";

fn genvit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genvit")).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = genvit(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn workdir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    d
}

fn build_data(dir: &Path, out: &str) {
    ok(dir, &["synth-corpus", "--config", "tiny.cfg", "--out", &format!("{out}-corpus")]);
    ok(dir, &["build-data", "--config", "tiny.cfg", "--corpus", &format!("{out}-corpus"), "--out", out, "--held-out"]);
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn exit_codes() {
    let d = workdir();
    assert_eq!(genvit(d.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(genvit(d.path(), &[]).status.code(), Some(1));
    assert_eq!(genvit(d.path(), &["no-such-command"]).status.code(), Some(1));
    let o = genvit(d.path(), &["synth-corpus", "--set", "bogus.key=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus.key"));
    let o = genvit(d.path(), &["generate", "--model", "missing", "--prompt", "a red circle"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing"));
}

#[test]
fn help_lists_every_key_with_its_default() {
    let d = workdir();
    let help = ok(d.path(), &["train", "--help"]);
    for line in ["train.lambda_diff = 1", "train.learning_rate = 0.001", "model.n_img = 16", "sampler.guidance_scale = 3"] {
        assert!(help.contains(line), "missing `{line}`");
    }
}

#[test]
fn data_build_is_byte_identical_across_runs() {
    let d = workdir();
    build_data(d.path(), "a");
    build_data(d.path(), "b");
    assert_eq!(files(&d.path().join("a")), files(&d.path().join("b")));
    let manifest = fs::read_to_string(d.path().join("a/manifest.json")).unwrap();
    assert!(manifest.contains("\"total\": 80") || manifest.contains("\"total\":80"), "{manifest}");
}

#[test]
fn full_pipeline_produces_images_and_reports() {
    let d = workdir();
    let p = d.path();
    build_data(p, "data");
    ok(p, &["pretrain-clip", "--config", "tiny.cfg", "--data", "data", "--out", "clip", "--steps", "3"]);
    ok(p, &["pretrain-diffusion", "--config", "tiny.cfg", "--data", "data", "--model", "clip", "--out", "diff", "--steps", "3", "--set", "diffusion.vae_steps=3"]);
    ok(p, &["train", "--config", "tiny.cfg", "--data", "data", "--model", "diff", "--out", "train", "--steps", "3"]);
    assert_eq!(fs::read_to_string(p.join("train/metrics.jsonl")).unwrap().lines().count(), 3);

    ok(p, &["generate", "--config", "tiny.cfg", "--model", "train", "--prompt", "a red circle", "--out", "g.ppm"]);
    let ppm = fs::read(p.join("g.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n16 16\n255\n"));
    assert_eq!(ppm.len(), b"P6\n16 16\n255\n".len() + 16 * 16 * 3);
    assert!(p.join("g.ppm.cfg").exists());

    ok(p, &["edit", "--config", "tiny.cfg", "--model", "train", "--image", "g.ppm", "--instruction", "make it blue", "--out", "e.ppm"]);
    assert!(p.join("e.ppm").exists());

    let answer = ok(p, &["ask", "--config", "tiny.cfg", "--model", "train", "--prompt", "[I2T] <IMAGE> what color?", "--image", "g.ppm", "--out", "a.ppm"]);
    assert!(!answer.contains("[SOI]"));
    assert!(!p.join("a.ppm").exists());
    let o = genvit(p, &["ask", "--config", "tiny.cfg", "--model", "train", "--prompt", "what color?"]);
    assert_eq!(o.status.code(), Some(1));

    let table = ok(p, &["evaluate", "--config", "tiny.cfg", "--model", "train", "--data", "data", "--out", "eval"]);
    for m in ["fid", "clip_similarity", "dino_proxy", "vqa_exact_match"] {
        assert!(table.contains(m), "{table}");
    }
    assert!(p.join("eval/report.jsonl").exists());

    let gc = ok(p, &["grad-check", "--config", "tiny.cfg", "--model", "train", "--data", "data", "--out", "gc"]);
    assert!(gc.contains("20/20 passed"), "{gc}");
    assert!(p.join("gc/gradcheck.json").exists());

    let o = genvit(p, &["train", "--config", "tiny.cfg", "--data", "data", "--model", "diff", "--out", "t2", "--steps", "1", "--set", "model.n_img=5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn preset_values_are_echoed_in_the_run_config() {
    let d = workdir();
    let p = d.path();
    build_data(p, "data");
    ok(p, &["pretrain-clip", "--config", "tiny.cfg", "--data", "data", "--out", "clip", "--steps", "1"]);
    ok(p, &["pretrain-diffusion", "--config", "tiny.cfg", "--data", "data", "--model", "clip", "--out", "diff", "--steps", "1", "--set", "diffusion.vae_steps=1"]);
    let preset = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/paper-preset.cfg")).unwrap();
    fs::write(p.join("preset.cfg"), format!("{TINY}{preset}")).unwrap();
    ok(p, &["train", "--config", "preset.cfg", "--data", "data", "--model", "diff", "--out", "train", "--steps", "1"]);
    let run = fs::read_to_string(p.join("train/run.cfg")).unwrap();
    for line in ["train.batch_size = 128", "train.learning_rate = 0.00002", "train.weight_decay = 0.1", "train.warmup_ratio = 0.03", "train.max_grad_norm = 1"] {
        assert!(run.lines().any(|l| l == line), "missing `{line}` in\n{run}");
    }
}
