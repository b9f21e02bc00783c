use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scanid::net::build_network;
use scanid::net::checkpoint::load_checkpoint;
use scanid::seed::{derive, stream};

fn scanid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanid"))
        .args(args)
        .env_remove("SCANID_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_synth(out: &Path) {
    let o = scanid(&[
        "synth", "--scanners", "2", "--per-scanner", "10", "--seed", "3", "--height", "128", "--width", "128", "--out",
        s(out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_is_reproducible_and_counts_images() {
    let a = tempfile::tempdir().unwrap();
    small_synth(a.path());
    let ta = tree(a.path());
    std::fs::remove_dir_all(a.path()).unwrap();
    small_synth(a.path());
    assert_eq!(ta, tree(a.path()));
    assert_eq!(ta.keys().filter(|p| p.extension().is_some_and(|e| e == "jpg")).count(), 20);
    assert!(ta.contains_key(Path::new("manifest.txt")));
    assert!(ta.contains_key(Path::new("synth_config.json")));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = scanid(&["synth", "--scanners", "2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]: --out is required"), "{}", stderr(&o));
    let o = scanid(&["train", "--epochs", "many"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"));
    let o = scanid(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one_and_a_kind_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let o = scanid(&["forge", "--image", "/nonexistent/x.png", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[io]:"), "{}", stderr(&o));
    let o = scanid(&["synth", "--scanners", "1", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[parameter]:"), "{}", stderr(&o));
}

#[test]
fn zero_epoch_training_writes_initial_weights_and_paper_defaults() {
    let data = tempfile::tempdir().unwrap();
    small_synth(data.path());
    let run = tempfile::tempdir().unwrap();
    let o = scanid(&["train", "--data", s(data.path()), "--epochs", "0", "--seed", "5", "--out", s(run.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = load_checkpoint(&run.path().join("checkpoint.ckpt")).unwrap();
    let init = build_network(2, derive(5, &[stream::INIT])).unwrap();
    assert_eq!(ck.weights.params(), init.params());
    assert_eq!(ck.weights.buffers(), init.buffers());
    let frozen: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.path().join("train_config.json")).unwrap()).unwrap();
    assert_eq!(frozen["train"]["learning_rate"], 0.01);
    assert_eq!(frozen["train"]["momentum"], 0.5);
    assert_eq!(frozen["train"]["weight_decay"], 0.0001);
    assert_eq!(frozen["train"]["batch_size"], 64);
    assert_eq!(frozen["train"]["epochs"], 0);
    let curves = std::fs::read_to_string(run.path().join("curves.csv")).unwrap();
    assert!(curves.starts_with("epoch,train_loss,val_loss,val_patch_acc"));
    assert_eq!(curves.lines().count(), 1);

    let ev = tempfile::tempdir().unwrap();
    let ckpt = run.path().join("checkpoint.ckpt");
    let o = scanid(&["eval", "--data", s(data.path()), "--checkpoint", s(&ckpt), "--out", s(ev.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["images"], 6);
    assert_eq!(m["patches"], 24);
    assert_eq!(m["checkpoint_sha256"].as_str().unwrap(), ck.hash);
    for f in ["confusion_patch.csv", "confusion_image.csv", "confusion_patch.png", "confusion_image.png", "eval_config.json"] {
        assert!(ev.path().join(f).exists(), "{f}");
    }

    let img = data.path().join("scanner_00/img_000.jpg");
    let mp = tempfile::tempdir().unwrap();
    let o = scanid(&["map", "--image", s(&img), "--checkpoint", s(&ckpt), "--out", s(mp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    for stride in [64, 32, 16, 4] {
        for f in [format!("map_s{stride}.rmap"), format!("heatmap_s{stride}.png"), format!("mask_s{stride}.png")] {
            assert!(mp.path().join(&f).exists(), "{f}");
        }
    }
    let one = tempfile::tempdir().unwrap();
    let o = scanid(&["map", "--image", s(&img), "--checkpoint", s(&ckpt), "--strides", "32", "--out", s(one.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let files = tree(one.path());
    assert_eq!(files.keys().filter(|p| p.extension().is_some_and(|e| e == "rmap")).count(), 1);

    let o = scanid(&["report", s(run.path()), s(ev.path()), s(mp.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let md = String::from_utf8_lossy(&o.stdout);
    assert!(md.contains("patch accuracy") && md.contains("| 4 |"), "{md}");
}

#[test]
fn config_file_is_merged_under_flags_and_env_overrides_out() {
    let data = tempfile::tempdir().unwrap();
    small_synth(data.path());
    let work = tempfile::tempdir().unwrap();
    let from_file = work.path().join("from_file");
    let from_env = work.path().join("from_env");
    let cfg = work.path().join("run.json");
    let text = serde_json::json!({
        "data": data.path(),
        "out": from_file,
        "train": {"epochs": 0, "seed": 9, "learning_rate": 0.02}
    });
    std::fs::write(&cfg, text.to_string()).unwrap();

    let o = scanid(&["--config", s(&cfg), "train", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let frozen: serde_json::Value =
        serde_json::from_slice(&std::fs::read(from_file.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(frozen["train"]["seed"], 4);
    assert_eq!(frozen["train"]["learning_rate"], 0.02);
    assert_eq!(frozen["train"]["momentum"], 0.5);

    let o = Command::new(env!("CARGO_BIN_EXE_scanid"))
        .args(["--config", s(&cfg), "train"])
        .env("SCANID_OUT_DIR", &from_env)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(from_env.join("checkpoint.ckpt").exists());

    std::fs::write(&cfg, r#"{"train": {"epochs": 0}, "bogus": 1}"#).unwrap();
    let o = scanid(&["--config", s(&cfg), "train", "--out", s(&from_env)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forge_writes_image_mask_and_sidecar() {
    let data = tempfile::tempdir().unwrap();
    small_synth(data.path());
    let img = data.path().join("scanner_00/img_001.jpg");
    let donor = data.path().join("scanner_01/img_002.jpg");
    let out = tempfile::tempdir().unwrap();
    let o = scanid(&[
        "forge", "--image", s(&img), "--donor", s(&donor), "--image-label", "0", "--donor-label", "1", "--seed", "2",
        "--out", s(out.path()),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("forgery.json")).unwrap()).unwrap();
    assert_eq!(meta["kind"], "multi_source");
    let mask = scanid::relmap::Mask::from_png(&std::fs::read(out.path().join("mask.png")).unwrap()).unwrap();
    let r = &meta["dst_rect"];
    assert_eq!(mask.count() as u64, r["n_rows"].as_u64().unwrap() * r["n_cols"].as_u64().unwrap());

    let again = tempfile::tempdir().unwrap();
    let o = scanid(&["forge", "--image", s(&img), "--seed", "2", "--jpeg-quality", "85", "--out", s(again.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(again.path().join("forgery.json")).unwrap()).unwrap();
    assert_eq!(meta["kind"], "self_copy");
    assert_eq!(meta["jpeg_quality"], 85);
}
