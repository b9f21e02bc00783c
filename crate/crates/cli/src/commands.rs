use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use scanid::classify::evaluate;
use scanid::dataio::{load_image, save_image, write_file, DatasetManifest, Split};
use scanid::forge::{random_self_copy, random_splice, Donor};
use scanid::net::checkpoint::{load_checkpoint, save_checkpoint};
use scanid::relmap::{
    localization_score, reliability_map_for, render_heatmap, save_map, threshold_map, voted_scanner, Mask,
};
use scanid::synthscan::{build_synthetic_dataset, ContentSource, MANIFEST_FILE};
use scanid::trainer::{train_on, LabelledImages};
use scanid::Exec;

use crate::config::{freeze, load, require, resolve_out, set, CliError, CliResult, EvalRun, ForgeRun, MapRun, SynthRun, TrainRun};
use crate::{EvalArgs, ForgeArgs, MapArgs, ReportArgs, SynthArgs, TrainArgs};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    scanid::Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
    .into()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| scanid::Error::Encode(e.to_string()))?;
    write_file(path, text.as_bytes())?;
    Ok(())
}

fn read_manifest(data: &Path) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::read(&data.join(MANIFEST_FILE))?)
}

pub fn synth(a: SynthArgs, file: Option<&Path>, exec: &Exec) -> CliResult<()> {
    let mut run: SynthRun = load(file)?;
    let s = &mut run.synth;
    set(&mut s.num_scanners, a.scanners);
    set(&mut s.images_per_scanner, a.per_scanner);
    set(&mut s.seed, a.seed);
    set(&mut s.height, a.height);
    set(&mut s.width, a.width);
    set(&mut s.levels.gain_std, a.gain_std);
    set(&mut s.levels.row_std, a.row_std);
    set(&mut s.levels.readout_std, a.readout_std);
    set(&mut s.content, a.content_dir.map(ContentSource::Directory));
    s.lossless |= a.lossless;
    let out = resolve_out(a.out, &run.out)?;
    run.out = Some(out.clone());
    let manifest = build_synthetic_dataset(&run.synth, &out, exec)?;
    freeze(&out, "synth", &run)?;
    println!(
        "{}",
        json!({"images": manifest.entries.len(), "labels": manifest.labels.len(), "manifest": out.join(MANIFEST_FILE)})
    );
    Ok(())
}

pub fn forge(a: ForgeArgs, file: Option<&Path>) -> CliResult<()> {
    let mut run: ForgeRun = load(file)?;
    set(&mut run.image, a.image.map(Some));
    set(&mut run.donor, a.donor.map(Some));
    set(&mut run.image_label, a.image_label.map(Some));
    set(&mut run.donor_label, a.donor_label.map(Some));
    set(&mut run.seed, a.seed);
    set(&mut run.jpeg_quality, a.jpeg_quality.map(Some));
    set(&mut run.forge.min_side, a.min_side);
    set(&mut run.forge.max_side, a.max_side);
    set(&mut run.forge.min_scale, a.min_scale);
    set(&mut run.forge.max_scale, a.max_scale);
    let out = resolve_out(a.out, &run.out)?;
    run.out = Some(out.clone());
    let image = load_image(require(&run.image, "image")?)?;
    let mut record = match &run.donor {
        Some(path) => {
            let donor_img = load_image(path)?;
            let donor = Donor {
                image: &donor_img,
                id: path.display().to_string(),
                label: run.donor_label,
            };
            random_splice(&image, run.image_label, &donor, &run.forge, run.seed)?
        }
        None => random_self_copy(&image, &run.forge, run.seed)?,
    };
    if let Some(q) = run.jpeg_quality {
        record = record.recompress(q)?;
    }
    save_image(&record.forged, &out.join("forged.png"), 100)?;
    write_file(&out.join("mask.png"), &record.truth_mask.to_png()?)?;
    write_json(&out.join("forgery.json"), &record.meta)?;
    freeze(&out, "forge", &run)?;
    println!("{}", json!({"kind": record.meta.kind, "dst_rect": record.meta.dst_rect, "warnings": record.meta.warnings}));
    Ok(())
}

pub fn train(a: TrainArgs, file: Option<&Path>, exec: &Exec) -> CliResult<()> {
    let mut run: TrainRun = load(file)?;
    set(&mut run.data, a.data.map(Some));
    let t = &mut run.train;
    set(&mut t.epochs, a.epochs);
    set(&mut t.seed, a.seed);
    set(&mut t.learning_rate, a.learning_rate);
    set(&mut t.momentum, a.momentum);
    set(&mut t.weight_decay, a.weight_decay);
    set(&mut t.batch_size, a.batch_size);
    set(&mut t.sub_image, a.sub_image.map(|s| [s, s]));
    t.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let out = resolve_out(a.out, &run.out)?;
    run.out = Some(out.clone());
    let data = require(&run.data, "data")?.to_path_buf();
    let manifest = read_manifest(&data)?;
    let train_set = LabelledImages::load(&manifest, &data, Split::Train, exec)?;
    let val_set = LabelledImages::load(&manifest, &data, Split::Val, exec)?;
    let outcome = train_on(&train_set, &val_set, manifest.labels.len(), &run.train, exec, |s, _| {
        log::info!("epoch {} val patch accuracy {:.4}", s.epoch, s.val_patch_acc);
        ControlFlow::Continue(())
    })?;
    let cfg_json = serde_json::to_value(&run.train).map_err(|e| scanid::Error::Encode(e.to_string()))?;
    let hash = save_checkpoint(&out.join("checkpoint.ckpt"), &outcome.best, &manifest.labels, &cfg_json)?;
    save_checkpoint(&out.join("last.ckpt"), &outcome.last, &manifest.labels, &cfg_json)?;
    write_file(&out.join("curves.csv"), outcome.curves.to_csv().as_bytes())?;
    let best_acc = outcome.best_epoch.map(|e| outcome.curves.epochs[e].val_patch_acc);
    let summary = json!({
        "epochs_run": outcome.curves.epochs.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_patch_acc": best_acc,
        "checkpoint": out.join("checkpoint.ckpt"),
        "checkpoint_sha256": hash,
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    freeze(&out, "train", &run)?;
    println!("{summary}");
    Ok(())
}

pub fn eval(a: EvalArgs, file: Option<&Path>, exec: &Exec) -> CliResult<()> {
    let mut run: EvalRun = load(file)?;
    set(&mut run.data, a.data.map(Some));
    set(&mut run.checkpoint, a.checkpoint.map(Some));
    set(&mut run.split, a.split);
    set(&mut run.tile, a.tile);
    set(&mut run.seed, a.seed);
    let split: Split = run.split.parse().map_err(|e: scanid::Error| CliError::usage(e.to_string()))?;
    let out = resolve_out(a.out, &run.out)?;
    run.out = Some(out.clone());
    let data = require(&run.data, "data")?.to_path_buf();
    let ckpt = load_checkpoint(require(&run.checkpoint, "checkpoint")?)?;
    let manifest = read_manifest(&data)?;
    let m = evaluate(&manifest, &data, split, &ckpt.weights, &ckpt.labels, run.tile, run.tile, run.seed, exec)?;
    let metrics = json!({
        "split": split,
        "patch_accuracy": m.patch_accuracy,
        "image_accuracy": m.image_accuracy,
        "images": m.images,
        "patches": m.patches,
        "tile": run.tile,
        "seed": run.seed,
        "labels": ckpt.labels.names(),
        "checkpoint_sha256": ckpt.hash,
    });
    write_json(&out.join("metrics.json"), &metrics)?;
    for (name, cm) in [("patch", &m.patch_confusion), ("image", &m.image_confusion)] {
        write_file(&out.join(format!("confusion_{name}.csv")), cm.to_csv(&ckpt.labels).as_bytes())?;
        save_image(&cm.render(24), &out.join(format!("confusion_{name}.png")), 100)?;
    }
    freeze(&out, "eval", &run)?;
    println!("{metrics}");
    Ok(())
}

pub fn map(a: MapArgs, file: Option<&Path>, exec: &Exec) -> CliResult<()> {
    let mut run: MapRun = load(file)?;
    set(&mut run.image, a.image.map(Some));
    set(&mut run.checkpoint, a.checkpoint.map(Some));
    set(&mut run.strides, a.strides);
    set(&mut run.tau, a.tau);
    set(&mut run.truth, a.truth.map(Some));
    if run.strides.is_empty() || run.strides.contains(&0) {
        return Err(CliError::usage("--strides needs one or more positive strides"));
    }
    if !(run.tau > 0.0 && run.tau < 1.0) {
        return Err(CliError::usage(format!("--tau {} must lie in (0, 1)", run.tau)));
    }
    let out = resolve_out(a.out, &run.out)?;
    run.out = Some(out.clone());
    let image = load_image(require(&run.image, "image")?)?;
    let ckpt = load_checkpoint(require(&run.checkpoint, "checkpoint")?)?;
    let truth = match &run.truth {
        Some(p) => Some(Mask::from_png(&std::fs::read(p).map_err(|e| io_err(p, e))?)?),
        None => None,
    };
    let scanner = voted_scanner(&image, &ckpt.weights, exec)?;
    let mut per_stride = Vec::new();
    for &stride in &run.strides {
        let rmap = reliability_map_for(&image, &ckpt.weights, stride, scanner, exec)?;
        save_map(&out.join(format!("map_s{stride}.rmap")), &rmap, &ckpt.hash)?;
        save_image(&render_heatmap(&rmap), &out.join(format!("heatmap_s{stride}.png")), 100)?;
        let mask = threshold_map(&rmap, run.tau)?;
        write_file(&out.join(format!("mask_s{stride}.png")), &mask.to_png()?)?;
        let mean = rmap.probs().iter().sum::<f64>() / rmap.probs().len() as f64;
        let score = truth.as_ref().map(|t| localization_score(&mask, t)).transpose()?;
        per_stride.push(json!({
            "stride": stride,
            "mean_reliability": mean,
            "flagged_fraction": mask.count() as f64 / (mask.height() * mask.width()) as f64,
            "iou": score.map(|s| s.iou),
            "f1": score.map(|s| s.f1),
        }));
    }
    let summary = json!({
        "voted_scanner": ckpt.labels.names()[scanner],
        "tau": run.tau,
        "checkpoint_sha256": ckpt.hash,
        "strides": per_stride,
    });
    write_json(&out.join("map_summary.json"), &summary)?;
    freeze(&out, "map", &run)?;
    println!("{summary}");
    Ok(())
}

fn read_json(path: &Path) -> CliResult<Option<serde_json::Value>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| scanid::Error::Format(format!("{}: {e}", path.display())))?;
    Ok(Some(value))
}

fn pct(v: &serde_json::Value) -> String {
    v.as_f64().map_or("-".into(), |x| format!("{:.2}%", 100.0 * x))
}

pub fn report(a: ReportArgs) -> CliResult<()> {
    let mut md = String::from("# scanid report\n");
    for dir in &a.runs {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} is not a directory", dir.display())));
        }
        let _ = writeln!(md, "\n## {}\n", dir.display());
        let mut found = false;
        if let Some(t) = read_json(&dir.join("train_summary.json"))? {
            found = true;
            let _ = writeln!(
                md,
                "- training: {} epochs, best epoch {}, best val patch accuracy {}",
                t["epochs_run"], t["best_epoch"], pct(&t["best_val_patch_acc"])
            );
        }
        let curves = dir.join("curves.csv");
        if curves.exists() {
            found = true;
            let text = std::fs::read_to_string(&curves).map_err(|e| io_err(&curves, e))?;
            if let Some(last) = text.lines().skip(1).last() {
                let _ = writeln!(md, "- last curve row (epoch,train_loss,val_loss,val_patch_acc,train_patch_acc): `{last}`");
            }
        }
        if let Some(m) = read_json(&dir.join("metrics.json"))? {
            found = true;
            let _ = writeln!(
                md,
                "- {} split: patch accuracy {}, image accuracy {} ({} images, {} patches)",
                m["split"].as_str().unwrap_or("?"),
                pct(&m["patch_accuracy"]),
                pct(&m["image_accuracy"]),
                m["images"],
                m["patches"]
            );
        }
        if let Some(s) = read_json(&dir.join("map_summary.json"))? {
            found = true;
            let _ = writeln!(md, "- reliability maps against {} (tau {}):", s["voted_scanner"], s["tau"]);
            md.push_str("\n| stride | mean reliability | flagged | IoU | F1 |\n|---|---|---|---|---|\n");
            for row in s["strides"].as_array().into_iter().flatten() {
                let f = |k: &str| row[k].as_f64().map_or("-".into(), |x| format!("{x:.4}"));
                let _ = writeln!(
                    md,
                    "| {} | {} | {} | {} | {} |",
                    row["stride"],
                    f("mean_reliability"),
                    f("flagged_fraction"),
                    f("iou"),
                    f("f1")
                );
            }
        }
        if !found {
            md.push_str("- no recognised artifacts\n");
        }
    }
    let out: PathBuf = a.out.unwrap_or_else(|| a.runs[0].clone());
    write_file(&out.join("report.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}
