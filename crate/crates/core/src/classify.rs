//! Per-patch prediction, per-image majority vote and accuracy metrics.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetManifest, ImageRgb, LabelRegistry, Split};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::{NetworkWeights, ProbVector};
use crate::seed::derive;
use crate::tiling::{extract_random_patch, split_zigzag, Patch, SubImageSpec, PATCH_SIZE};
use crate::trainer::LabelledImages;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDecision {
    pub sub_image: SubImageSpec,
    pub prob: ProbVector,
    pub label: usize,
}

impl PatchDecision {
    pub fn new(sub_image: SubImageSpec, prob: ProbVector) -> Self {
        let label = prob.argmax();
        PatchDecision { sub_image, prob, label }
    }
}

/// The analysis patch of a tile: the tile itself when it is patch-sized,
/// otherwise a seeded random crop inside it.
pub fn tile_patch(image: &ImageRgb, tile: &SubImageSpec, seed: u64, index: usize) -> Result<Patch> {
    if tile.n_rows == PATCH_SIZE && tile.n_cols == PATCH_SIZE {
        Patch::from_image(image, (tile.row0, tile.col0), "")
    } else {
        extract_random_patch(tile, image, derive(seed, &[index as u64]))
    }
}

/// One eval-mode decision per `n` x `m` zig-zag tile, in tile order.
pub fn classify_patches(
    image: &ImageRgb,
    weights: &NetworkWeights,
    n: usize,
    m: usize,
    seed: u64,
    exec: &Exec,
) -> Result<Vec<PatchDecision>> {
    let tiles = split_zigzag(image.height(), image.width(), n, m)?;
    let patches = tiles
        .iter()
        .enumerate()
        .map(|(i, t)| tile_patch(image, t, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageRgb> = patches.iter().map(|p| &p.pixels).collect();
    let probs = weights.predict(&refs, exec)?;
    Ok(tiles.into_iter().zip(probs).map(|(t, p)| PatchDecision::new(t, p)).collect())
}

/// Most frequent label. Ties go to the larger summed probability of the
/// tied labels, then to the smaller label id.
pub fn majority_vote(decisions: &[PatchDecision]) -> Result<usize> {
    if decisions.is_empty() {
        return Err(Error::Input("cannot vote over zero decisions".into()));
    }
    // label -> (count, summed probability of that label over its voters)
    let mut tally: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for d in decisions {
        let e = tally.entry(d.label).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d.prob.get(d.label);
    }
    let mut best: Option<(usize, usize, f64)> = None;
    for (&label, &(count, mass)) in &tally {
        let better = match best {
            None => true,
            Some((_, bc, bm)) => count > bc || (count == bc && mass > bm),
        };
        if better {
            best = Some((label, count, mass));
        }
    }
    Ok(best.expect("non-empty").0)
}

/// Rows are true labels, columns predicted labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.trace() as f64 / t as f64
        }
    }

    pub fn to_csv(&self, labels: &LabelRegistry) -> String {
        let mut s = String::from("true\\predicted");
        for n in labels.names() {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (name, row) in labels.names().iter().zip(&self.counts) {
            s.push_str(name);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }

    /// Grid image shaded by the row-normalized fraction of each cell: white
    /// for 0, dark blue for 1.
    pub fn render(&self, cell: usize) -> ImageRgb {
        let n = self.classes().max(1);
        let side = (n * cell).max(crate::dataio::MIN_SIDE);
        ImageRgb::from_fn(side, side, |r, c| {
            let (i, j) = (r / cell, c / cell);
            if i >= self.classes() || j >= self.classes() || r % cell == 0 || c % cell == 0 {
                return [255, 255, 255];
            }
            let row: u64 = self.counts[i].iter().sum();
            let f = if row == 0 { 0.0 } else { self.counts[i][j] as f64 / row as f64 };
            let mix = |white: f64, dark: f64| (white + (dark - white) * f).round() as u8;
            [mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0)]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub patch_accuracy: f64,
    pub image_accuracy: f64,
    pub patch_confusion: ConfusionMatrix,
    pub image_confusion: ConfusionMatrix,
    pub images: usize,
    pub patches: usize,
}

/// Counts patch and image level outcomes of already made decisions.
pub fn score_decisions(per_image: &[(Vec<PatchDecision>, usize)], classes: usize) -> Result<Metrics> {
    if per_image.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let mut patch_confusion = ConfusionMatrix::new(classes);
    let mut image_confusion = ConfusionMatrix::new(classes);
    for (decisions, truth) in per_image {
        if *truth >= classes || decisions.iter().any(|d| d.label >= classes) {
            return Err(Error::Label(format!("label outside 0..{classes}")));
        }
        for d in decisions {
            patch_confusion.add(*truth, d.label);
        }
        image_confusion.add(*truth, majority_vote(decisions)?);
    }
    Ok(Metrics {
        patch_accuracy: patch_confusion.accuracy(),
        image_accuracy: image_confusion.accuracy(),
        images: per_image.len(),
        patches: patch_confusion.total() as usize,
        patch_confusion,
        image_confusion,
    })
}

/// Decisions for every image of a decoded set, images processed in parallel.
pub fn decide_all(
    data: &LabelledImages,
    weights: &NetworkWeights,
    n: usize,
    m: usize,
    seed: u64,
    exec: &Exec,
) -> Result<Vec<(Vec<PatchDecision>, usize)>> {
    let sequential = Exec::sequential();
    let decisions = exec.try_map(data.len(), |i| {
        classify_patches(&data.images[i], weights, n, m, derive(seed, &[i as u64]), &sequential)
    })?;
    Ok(decisions.into_iter().zip(data.labels.iter().copied()).collect())
}

/// Evaluates one split of a manifest against a checkpoint whose label
/// registry is `labels`. Manifest labels are matched by name.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Split,
    weights: &NetworkWeights,
    labels: &LabelRegistry,
    n: usize,
    m: usize,
    seed: u64,
    exec: &Exec,
) -> Result<Metrics> {
    let mut data = LabelledImages::load(manifest, base_dir, split, exec)?;
    if data.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    for l in data.labels.iter_mut() {
        let name = &manifest.labels.names()[*l];
        *l = labels
            .id_of(name)
            .ok_or_else(|| Error::Label(format!("scanner {name:?} is not known to the checkpoint")))?;
    }
    score_decisions(&decide_all(&data, weights, n, m, seed, exec)?, labels.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(label: usize, p: f64, classes: usize) -> PatchDecision {
        let rest = (1.0 - p) / (classes - 1) as f64;
        let probs = (0..classes).map(|c| if c == label { p } else { rest }).collect();
        PatchDecision::new(
            SubImageSpec {
                row0: 0,
                col0: 0,
                n_rows: 64,
                n_cols: 64,
            },
            ProbVector::new(probs).unwrap(),
        )
    }

    #[test]
    fn vote_examples() {
        let d = [decision(2, 0.9, 3), decision(2, 0.6, 3), decision(1, 0.99, 3)];
        assert_eq!(majority_vote(&d).unwrap(), 2);
        let tie = [decision(1, 0.9, 3), decision(2, 0.95, 3)];
        assert_eq!(majority_vote(&tie).unwrap(), 2);
        assert_eq!(majority_vote(&[decision(5, 0.5, 6)]).unwrap(), 5);
        let exact = [decision(2, 0.7, 3), decision(1, 0.7, 3)];
        assert_eq!(majority_vote(&exact).unwrap(), 1);
        assert!(matches!(majority_vote(&[]), Err(Error::Input(_))));
    }

    #[test]
    fn scripted_fixture_counts() {
        // 3 images x 4 patches: 4/4, 2/4 (vote lost on probability), 3/4 correct.
        let imgs = vec![
            (vec![decision(0, 0.9, 2); 4], 0),
            (
                vec![decision(1, 0.6, 2), decision(1, 0.6, 2), decision(0, 0.9, 2), decision(0, 0.9, 2)],
                1,
            ),
            (
                vec![decision(1, 0.8, 2), decision(1, 0.8, 2), decision(1, 0.8, 2), decision(0, 0.8, 2)],
                1,
            ),
        ];
        let m = score_decisions(&imgs, 2).unwrap();
        assert_eq!(m.patch_accuracy, 9.0 / 12.0);
        assert_eq!(m.image_accuracy, 2.0 / 3.0);
        assert_eq!(m.patch_confusion.counts, vec![vec![4, 0], vec![3, 5]]);
        assert_eq!(m.image_confusion.counts, vec![vec![1, 0], vec![1, 1]]);
    }

    #[test]
    fn confusion_csv_and_render() {
        let mut c = ConfusionMatrix::new(2);
        c.add(0, 0);
        c.add(1, 0);
        let labels = LabelRegistry::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.to_csv(&labels), "true\\predicted,a,b\na,1,0\nb,1,0\n");
        let img = c.render(32);
        assert_eq!(img.pixel(10, 10), [8, 48, 107]);
        assert_eq!(img.pixel(10, 42), [255, 255, 255]);
    }
}
