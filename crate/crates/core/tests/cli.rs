use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anodet::config::{ExperimentConfig, OUT_ENV};
use anodet::data::{load_dataset, CategoryKind};
use serde_json::Value;

fn anodet(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anodet"));
    c.args(args).env_remove(OUT_ENV);
    c
}

fn run(args: &[&str]) -> Output {
    anodet(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        image_side: 32,
        channels: 1,
        latent_dim: 4,
        base_width: 8,
        batch_size: 2,
        total_steps: 4,
        log_every: 2,
        checkpoint_every: 3,
        category: "synthetic".into(),
        category_kind: Some(CategoryKind::Texture),
        texture_resize: 64,
        synth_train: 6,
        synth_test_normal: 3,
        synth_test_anomalous: 3,
        synth_side: 32,
        dataset_root: root.join("data"),
        ..Default::default()
    }
}

fn write_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.render()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn jsonl(p: &Path) -> Vec<Value> {
    fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Synthesizes the corpus and trains the small config into `out`.
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = write_config(dir, "small.toml", &small(dir));
    assert_eq!(code(&run(&["synth", "--config", s(&cfg)])), 0);
    let out = dir.join("run");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cfg, out)
}

#[test]
fn synth_is_reproducible_loadable_and_sized() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let path = write_config(dir.path(), "c.toml", &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["synth", "--config", s(&path), "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["synth", "--config", s(&path), "--out", s(&b)])), 0);
    assert_eq!(tree(&a), tree(&b));
    let ds = load_dataset(&a, &cfg.category_spec()).unwrap();
    assert!(ds.warnings.is_empty(), "{:?}", ds.warnings);
    assert_eq!(ds.counts(), (6, 3, 3));
    let c = dir.path().join("c");
    assert_eq!(code(&run(&["synth", "--config", s(&path), "--out", s(&c), "--seed", "9"])), 0);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn train_writes_log_and_checkpoints_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let log = jsonl(&out.join("train_log.jsonl"));
    assert_eq!(log.len(), 2);
    for key in ["step", "l_eg", "l_d", "gp", "l_r", "l_r_prime", "l_star_eg"] {
        assert!(log[0].get(key).is_some(), "missing {key}");
    }
    assert!(out.join("checkpoints/step-00000003.ckpt").exists());
    assert!(out.join("config.toml").exists());
    let first = fs::read(out.join("final.ckpt")).unwrap();

    let again = dir.path().join("again");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&again)])), 0);
    assert_eq!(fs::read(again.join("final.ckpt")).unwrap(), first);

    let egbad = dir.path().join("egbad");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&egbad), "--alpha", "0"])), 0);
    for rec in jsonl(&egbad.join("train_log.jsonl")) {
        assert_eq!(rec["l_star_eg"], rec["l_eg"]);
    }
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let part = dir.path().join("part");
    assert_eq!(code(&run(&["train", "--config", s(&cfg), "--out", s(&part), "--steps", "2"])), 0);
    let cont = dir.path().join("cont");
    let o = run(&["train", "--config", s(&cfg), "--out", s(&cont), "--resume", s(&part.join("final.ckpt"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = anodet::checkpoint::Checkpoint::<f32>::load(&out.join("final.ckpt")).unwrap();
    let resumed = anodet::checkpoint::Checkpoint::<f32>::load(&cont.join("final.ckpt")).unwrap();
    assert_eq!(full.state, resumed.state);
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let path = write_config(dir.path(), "c.toml", &ExperimentConfig { total_steps: 1, log_every: 1, ..cfg });
    assert_eq!(code(&run(&["synth", "--config", s(&path)])), 0);
    let root = dir.path().join("envroot");
    let o = anodet(&["train", "--config", s(&path)]).env(OUT_ENV, &root).output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("synthetic/final.ckpt").exists());
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "alpah = 0.1\n").unwrap();
    let o = run(&["train", "--config", s(&p)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("did you mean `alpha`"), "{}", stderr(&o));
    fs::write(&p, "alpha = 3.0\n").unwrap();
    let o = run(&["train", "--config", s(&p)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("alpha"));
    assert_eq!(code(&run(&["train"])), 1);
    assert_eq!(code(&run(&["frobnicate", "--config", s(&p)])), 1);
    let good = write_config(dir.path(), "good.toml", &small(dir.path()));
    assert_eq!(code(&run(&["train", "--config", s(&good), "--lambda", "1.5"])), 1);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn score_records_errors_and_lambda_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let good = dir.path().join("data/synthetic/test/good");
    let bogus = dir.path().join("bogus.png");
    fs::write(&bogus, b"not an image").unwrap();
    let o = run(&["score", "--config", s(&cfg), "--out", s(&out), s(&good), s(&bogus)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = jsonl(&out.join("scores.jsonl"));
    assert_eq!(recs.len(), 4);
    assert!(recs[..3].iter().all(|r| r["patch_scores"].as_array().unwrap().len() == 4 && r["mode"] == "tiled"));
    assert!(recs[3]["error"].is_string());
    let first = fs::read(out.join("scores.jsonl")).unwrap();
    assert_eq!(code(&run(&["score", "--config", s(&cfg), "--out", s(&out), s(&good), s(&bogus)])), 0);
    assert_eq!(fs::read(out.join("scores.jsonl")).unwrap(), first);

    assert_eq!(code(&run(&["score", "--config", s(&cfg), "--out", s(&out), "--lambda", "0", s(&good)])), 0);
    for r in jsonl(&out.join("scores.jsonl")) {
        assert_eq!(r["score"], r["l_r"]);
    }
    assert_eq!(code(&run(&["score", "--config", s(&cfg), "--out", s(&out), s(&bogus)])), 2);
    let missing = dir.path().join("nothing.ckpt");
    assert_eq!(code(&run(&["score", "--config", s(&cfg), "--checkpoint", s(&missing), s(&good)])), 2);
}

#[test]
fn texture_checkpoint_scores_512_image_with_64_patches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { image_side: 64, texture_resize: 512, synth_side: 64, total_steps: 1, log_every: 1, ..small(dir.path()) };
    let path = write_config(dir.path(), "c.toml", &cfg);
    assert_eq!(code(&run(&["synth", "--config", s(&path)])), 0);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", s(&path), "--out", s(&out)])), 0);
    let img = dir.path().join("big.png");
    image::GrayImage::from_fn(512, 512, |x, y| image::Luma([((x * 7 + y * 3) % 256) as u8])).save(&img).unwrap();
    let o = run(&["score", "--config", s(&path), "--out", s(&out), s(&img)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recs = jsonl(&out.join("scores.jsonl"));
    assert_eq!(recs[0]["patch_scores"].as_array().unwrap().len(), 64);
}

#[test]
fn evaluate_writes_table_and_record() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let o = run(&["evaluate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let cat = &report["categories"][0];
    for key in ["auroc", "balanced_accuracy", "best_threshold", "positives", "negatives"] {
        assert!(cat.get(key).is_some(), "missing {key}");
    }
    assert_eq!((cat["positives"].as_u64(), cat["negatives"].as_u64()), (Some(3), Some(3)));
    assert!(fs::read_to_string(out.join("report.txt")).unwrap().contains("synthetic"));
    let first = fs::read(out.join("report.json")).unwrap();
    assert_eq!(code(&run(&["evaluate", "--config", s(&cfg), "--out", s(&out)])), 0);
    assert_eq!(fs::read(out.join("report.json")).unwrap(), first);
}

#[test]
fn reconstruct_writes_triplet_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = trained(dir.path());
    let input = dir.path().join("data/synthetic/test/good/000.png");
    let o = run(&["reconstruct", "--config", s(&cfg), "--out", s(&out), "--input", s(&input)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["000_input.png", "000_reconstruction.png", "000_diff.png"] {
        let img = image::open(out.join(name)).unwrap();
        assert_eq!((img.width(), img.height()), (64, 64), "{name}");
    }
    let side: Value = serde_json::from_slice(&fs::read(out.join("000_diff.json")).unwrap()).unwrap();
    assert!(side["scale"].as_f64().unwrap() > 0.0);
}

#[test]
fn divergence_exits_with_runtime_code_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = ExperimentConfig { checkpoint_every: 1, log_every: 1, ..small(dir.path()) };
    let path = write_config(dir.path(), "c.toml", &base);
    assert_eq!(code(&run(&["synth", "--config", s(&path)])), 0);
    let out = dir.path().join("run");
    assert_eq!(code(&run(&["train", "--config", s(&path), "--out", s(&out), "--steps", "3"])), 0);
    let good = out.join("final.ckpt");
    let before = fs::read(&good).unwrap();

    let div = write_config(dir.path(), "div.toml", &ExperimentConfig { learning_rate: 1e30, total_steps: 50, ..base });
    let o = run(&["train", "--config", s(&div), "--out", s(&out), "--resume", s(&good)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
    assert!(stderr(&o).contains(&format!("last good checkpoint: {}", good.display())), "{}", stderr(&o));
    assert_eq!(fs::read(&good).unwrap(), before);
    assert_eq!(anodet::checkpoint::Checkpoint::<f32>::load(&good).unwrap().state.step, 3);
    assert!(out.join("checkpoints/step-00000002.ckpt").exists());
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let cfg = ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
        n += 1;
    }
    assert!(n >= 2);
}
