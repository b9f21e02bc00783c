//! SGD training of the patch classifier.

use std::ops::ControlFlow;
use std::path::Path;

use ndarray::{Array2, ArrayD};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{load_image, DatasetManifest, ImageRgb, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::{batch_tensor, build_network, Network, NetworkWeights, ProbVector, Scalar};
use crate::seed::{derive, rng_for, stream};
use crate::tiling::{extract_random_patch, split_zigzag, SubImageSpec, PATCH_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub patches_per_subimage_per_epoch: usize,
    /// Sub-image height and width used to tile training images.
    pub sub_image: [usize; 2],
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f64,
    /// Batches used to re-estimate batch-norm statistics after each epoch
    /// (0 keeps the running averages from training).
    pub bn_recalibration_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.5,
            weight_decay: 0.0001,
            batch_size: 64,
            epochs: 50,
            seed: 0,
            patches_per_subimage_per_epoch: 1,
            sub_image: [128, 128],
            bn_momentum: 0.1,
            bn_recalibration_batches: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [self.learning_rate, self.momentum, self.weight_decay, self.bn_momentum];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || self.bn_momentum > 1.0 {
            return Err(Error::Parameter("rates must be finite and non-negative".into()));
        }
        if self.batch_size < 1 || self.patches_per_subimage_per_epoch < 1 {
            return Err(Error::Parameter("batch size and patches per sub-image must be at least 1".into()));
        }
        if self.sub_image.iter().any(|&s| s < PATCH_SIZE) {
            return Err(Error::Parameter(format!(
                "sub-image {:?} is smaller than a {PATCH_SIZE}x{PATCH_SIZE} patch",
                self.sub_image
            )));
        }
        Ok(())
    }
}

/// `-ln(prob[target])`, with the probability clamped at 1e-12.
pub fn cross_entropy(prob: &ProbVector, target: usize) -> Result<f64> {
    if target >= prob.len() {
        return Err(Error::Label(format!(
            "target {target} out of range for {} classes",
            prob.len()
        )));
    }
    Ok(-prob.get(target).max(1e-12).ln())
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Velocity<T> {
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Velocity<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Velocity {
            v: net.params().iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }
}

/// One momentum step: `v = momentum * v - lr * (g + wd * w)`, `w = w + v`.
/// Batch-norm scale and shift are not decayed.
pub fn sgd_update<T: Scalar>(
    net: &mut Network<T>,
    grads: &[ArrayD<T>],
    velocity: &mut Velocity<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    let n = net.params().len();
    if grads.len() != n || velocity.v.len() != n {
        return Err(Error::Shape(format!(
            "{n} parameter tensors but {} gradients and {} velocities",
            grads.len(),
            velocity.v.len()
        )));
    }
    for i in 0..n {
        let p = &net.params()[i];
        if grads[i].shape() != p.value.shape() || velocity.v[i].shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "{}: weights {:?}, gradient {:?}, velocity {:?}",
                p.name,
                p.value.shape(),
                grads[i].shape(),
                velocity.v[i].shape()
            )));
        }
    }
    let f = |x: f64| T::from_f64(x).unwrap();
    let (lr, mom) = (f(cfg.learning_rate), f(cfg.momentum));
    let (params, _) = net.params_and_buffers_mut();
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.v.iter_mut()) {
        let wd = if p.kind.decays() { f(cfg.weight_decay) } else { T::zero() };
        ndarray::Zip::from(&mut p.value)
            .and(g)
            .and(v)
            .for_each(|w, &g, v| {
                *v = mom * *v - lr * (g + wd * *w);
                *w = *w + *v;
            });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_patch_acc: f64,
    /// Running accuracy of the training batches (train-mode forward).
    pub train_patch_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub epochs: Vec<EpochStats>,
}

impl Curves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_patch_acc,train_patch_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, e.val_patch_acc, e.train_patch_acc
            ));
        }
        s
    }
}

pub struct TrainOutcome {
    /// Weights of the epoch with the best validation patch accuracy (the
    /// earliest such epoch on ties); initial weights when no epoch ran.
    pub best: NetworkWeights,
    pub best_epoch: Option<usize>,
    pub last: NetworkWeights,
    pub curves: Curves,
}

/// Decoded images of one split with their labels.
pub struct LabelledImages {
    pub images: Vec<ImageRgb>,
    pub labels: Vec<usize>,
}

impl LabelledImages {
    pub fn load(manifest: &DatasetManifest, base_dir: &Path, split: Split, exec: &Exec) -> Result<Self> {
        let entries: Vec<_> = manifest.entries_in(split).collect();
        let images = exec.try_map(entries.len(), |i| load_image(&manifest.resolve(base_dir, entries[i])))?;
        Ok(LabelledImages {
            images,
            labels: entries.iter().map(|e| e.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Every (image index, sub-image) pair of a split.
pub fn sub_images(images: &[ImageRgb], sub: [usize; 2]) -> Result<Vec<(usize, SubImageSpec)>> {
    let mut out = Vec::new();
    for (i, img) in images.iter().enumerate() {
        for s in split_zigzag(img.height(), img.width(), sub[0], sub[1])? {
            out.push((i, s));
        }
    }
    Ok(out)
}

/// One seeded random patch per sub-image (repeated `per_sub` times).
fn draw_patches(
    data: &LabelledImages,
    subs: &[(usize, SubImageSpec)],
    per_sub: usize,
    seed: u64,
    exec: &Exec,
) -> Result<Vec<(ImageRgb, usize)>> {
    exec.try_map(subs.len() * per_sub, |k| {
        let (img, sub) = subs[k / per_sub];
        let p = extract_random_patch(&sub, &data.images[img], derive(seed, &[k as u64]))?;
        Ok((p.pixels, data.labels[img]))
    })
}

struct PassStats {
    loss: f64,
    correct: usize,
    count: usize,
}

/// Eval-mode loss and accuracy over labelled patches.
pub fn patch_metrics(
    net: &NetworkWeights,
    patches: &[(ImageRgb, usize)],
    batch_size: usize,
    exec: &Exec,
) -> Result<(f64, f64)> {
    let mut stats = PassStats {
        loss: 0.0,
        correct: 0,
        count: 0,
    };
    for chunk in patches.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageRgb> = chunk.iter().map(|(p, _)| p).collect();
        let probs = net.predict(&refs, exec)?;
        for (p, (_, label)) in probs.iter().zip(chunk) {
            stats.loss += cross_entropy(p, *label)?;
            stats.correct += usize::from(p.argmax() == *label);
            stats.count += 1;
        }
    }
    let n = stats.count.max(1) as f64;
    Ok((stats.loss / n, stats.correct as f64 / n))
}

fn train_batch(
    net: &mut NetworkWeights,
    velocity: &mut Velocity<f32>,
    batch: &[&(ImageRgb, usize)],
    cfg: &TrainConfig,
    exec: &Exec,
) -> Result<PassStats> {
    let refs: Vec<&ImageRgb> = batch.iter().map(|(p, _)| p).collect();
    let x = batch_tensor::<f32>(&refs)?;
    let (logits, cache) = net.forward_train(&x, exec)?;
    let n = batch.len();
    let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
    let mut stats = PassStats {
        loss: 0.0,
        correct: 0,
        count: n,
    };
    for (i, (_, label)) in batch.iter().enumerate() {
        let p = crate::net::softmax(logits.row(i).as_slice().expect("standard layout"));
        stats.loss += cross_entropy(&p, *label)?;
        stats.correct += usize::from(p.argmax() == *label);
        for (c, &pc) in p.values().iter().enumerate() {
            let target = if c == *label { 1.0 } else { 0.0 };
            dlogits[[i, c]] = ((pc - target) / n as f64) as f32;
        }
    }
    let grads = net.backward(&dlogits, &cache, exec)?;
    net.update_running_stats(&cache, cfg.bn_momentum);
    sgd_update(net, &grads.grads, velocity, cfg)?;
    Ok(stats)
}

/// Re-estimates running batch-norm statistics as the plain average of the
/// batch statistics over `batches` training batches.
fn recalibrate_bn(
    net: &mut NetworkWeights,
    patches: &[&(ImageRgb, usize)],
    cfg: &TrainConfig,
    exec: &Exec,
) -> Result<()> {
    for (k, chunk) in patches
        .chunks(cfg.batch_size)
        .take(cfg.bn_recalibration_batches)
        .enumerate()
    {
        let refs: Vec<&ImageRgb> = chunk.iter().map(|(p, _)| p).collect();
        let x = batch_tensor::<f32>(&refs)?;
        let (_, cache) = net.forward_train(&x, exec)?;
        // Cumulative mean: the k-th batch gets weight 1 / (k + 1).
        net.update_running_stats(&cache, 1.0 / (k as f64 + 1.0));
    }
    Ok(())
}

/// Trains a fresh network on the train split of `manifest`, selecting the
/// epoch with the best validation patch accuracy.
///
/// Results depend only on the data and `cfg`: all parallel work is reduced
/// in a fixed order, so the worker count does not change any output.
pub fn train(manifest: &DatasetManifest, base_dir: &Path, cfg: &TrainConfig, exec: &Exec) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = LabelledImages::load(manifest, base_dir, Split::Train, exec)?;
    let val_set = LabelledImages::load(manifest, base_dir, Split::Val, exec)?;
    train_on(&train_set, &val_set, manifest.labels.len(), cfg, exec, |_, _| ControlFlow::Continue(()))
}

/// Training loop over already decoded images. `on_epoch` sees every epoch's
/// statistics and weights as they are produced and may stop training early.
pub fn train_on(
    train_set: &LabelledImages,
    val_set: &LabelledImages,
    num_classes: usize,
    cfg: &TrainConfig,
    exec: &Exec,
    mut on_epoch: impl FnMut(&EpochStats, &NetworkWeights) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("the train split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Data("the val split is empty".into()));
    }
    if let Some(&bad) = train_set.labels.iter().chain(&val_set.labels).find(|&&l| l >= num_classes) {
        return Err(Error::Label(format!("label {bad} out of range for {num_classes} classes")));
    }
    let mut net = build_network(num_classes, derive(cfg.seed, &[stream::INIT]))?;
    let mut velocity = Velocity::zeros_like(&net);
    let train_subs = sub_images(&train_set.images, cfg.sub_image)?;
    let val_subs = sub_images(&val_set.images, cfg.sub_image)?;
    let val_patches = draw_patches(val_set, &val_subs, 1, derive(cfg.seed, &[stream::EVAL]), exec)?;

    let mut best = net.clone();
    let mut best_epoch = None;
    let mut best_acc = f64::NEG_INFINITY;
    let mut curves = Curves::default();
    for epoch in 0..cfg.epochs {
        let patch_seed = derive(cfg.seed, &[stream::PATCH, epoch as u64]);
        let patches = draw_patches(train_set, &train_subs, cfg.patches_per_subimage_per_epoch, patch_seed, exec)?;
        let mut order: Vec<&(ImageRgb, usize)> = patches.iter().collect();
        order.shuffle(&mut rng_for(cfg.seed, &[stream::SHUFFLE, epoch as u64]));

        let mut totals = PassStats {
            loss: 0.0,
            correct: 0,
            count: 0,
        };
        for batch in order.chunks(cfg.batch_size) {
            let s = train_batch(&mut net, &mut velocity, batch, cfg, exec)?;
            totals.loss += s.loss;
            totals.correct += s.correct;
            totals.count += s.count;
        }
        if cfg.bn_recalibration_batches > 0 {
            recalibrate_bn(&mut net, &order, cfg, exec)?;
        }
        let (val_loss, val_acc) = patch_metrics(&net, &val_patches, cfg.batch_size, exec)?;
        let stats = EpochStats {
            epoch,
            train_loss: totals.loss / totals.count as f64,
            val_loss,
            val_patch_acc: val_acc,
            train_patch_acc: totals.correct as f64 / totals.count as f64,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.4}, val loss {:.4} acc {:.4}",
            stats.train_loss,
            stats.train_patch_acc,
            val_loss,
            val_acc
        );
        if val_acc > best_acc {
            best_acc = val_acc;
            best = net.clone();
            best_epoch = Some(epoch);
        }
        let flow = on_epoch(&stats, &net);
        curves.epochs.push(stats);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: net,
        curves,
    })
}

/// Eval-mode accuracy on one patch per sub-image (the tile itself when the
/// sub-image is patch-sized).
pub fn subimage_patch_accuracy(
    net: &NetworkWeights,
    data: &LabelledImages,
    sub: [usize; 2],
    seed: u64,
    exec: &Exec,
) -> Result<f64> {
    let subs = sub_images(&data.images, sub)?;
    let patches = draw_patches(data, &subs, 1, seed, exec)?;
    Ok(patch_metrics(net, &patches, 64, exec)?.1)
}
