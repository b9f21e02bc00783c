use std::ops::ControlFlow;

use scanid::classify::{classify_patches, evaluate};
use scanid::dataio::Split;
use scanid::net::checkpoint::{load_checkpoint, save_checkpoint};
use scanid::synthscan::{build_synthetic_dataset, SynthConfig};
use scanid::trainer::{subimage_patch_accuracy, train_on, LabelledImages, TrainConfig};
use scanid::Exec;

#[test]
fn short_training_learns_and_checkpoints_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let exec = Exec::sequential();
    let synth = SynthConfig {
        num_scanners: 3,
        images_per_scanner: 12,
        height: 128,
        width: 128,
        seed: 70,
        ..SynthConfig::default()
    };
    let manifest = build_synthetic_dataset(&synth, dir.path(), &exec).unwrap();
    let train = LabelledImages::load(&manifest, dir.path(), Split::Train, &exec).unwrap();
    let val = LabelledImages::load(&manifest, dir.path(), Split::Val, &exec).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        seed: 71,
        ..TrainConfig::default()
    };
    let out = train_on(&train, &val, 3, &cfg, &exec, |_, _| ControlFlow::Continue(())).unwrap();
    let losses: Vec<f64> = out.curves.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|p| p[1] <= p[0]), "{losses:?}");

    let path = dir.path().join("model.ckpt");
    let hash = save_checkpoint(&path, &out.best, &manifest.labels, &serde_json::to_value(&cfg).unwrap()).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.hash, hash);
    assert_eq!(ck.labels, manifest.labels);
    let before = subimage_patch_accuracy(&out.best, &val, cfg.sub_image, 5, &exec).unwrap();
    let after = subimage_patch_accuracy(&ck.weights, &val, cfg.sub_image, 5, &exec).unwrap();
    assert_eq!(before, after);

    let seq = evaluate(&manifest, dir.path(), Split::Test, &ck.weights, &ck.labels, 64, 64, 0, &exec).unwrap();
    let par = evaluate(&manifest, dir.path(), Split::Test, &ck.weights, &ck.labels, 64, 64, 0, &Exec::with_workers(3).unwrap())
        .unwrap();
    assert_eq!(seq.patch_confusion, par.patch_confusion);
    assert_eq!(seq.image_confusion, par.image_confusion);
    assert_eq!(seq.patches, seq.images * 4);
}

#[test]
fn tile_decisions_do_not_depend_on_batching() {
    let img = scanid::synthscan::procedural_content(192, 192, 3);
    let net = scanid::net::build_network(4, 9).unwrap();
    let all = classify_patches(&img, &net, 64, 64, 0, &Exec::sequential()).unwrap();
    for (i, d) in all.iter().enumerate() {
        let one = img.crop(d.sub_image.row0, d.sub_image.col0, 64, 64).unwrap();
        let p = net.predict(&[&one], &Exec::sequential()).unwrap().remove(0);
        assert_eq!(p.argmax(), d.label, "tile {i}");
        for (a, b) in p.values().iter().zip(d.prob.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
