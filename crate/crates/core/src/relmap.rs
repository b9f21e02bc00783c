//! Per-pixel reliability maps: each pixel gets the mean, over every sliding
//! window containing it, of the window's probability for the image's voted
//! scanner. Low values flag regions that do not look like that scanner.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::classify::{classify_patches, majority_vote};
use crate::dataio::{write_file, ImageRgb};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::net::NetworkWeights;
use crate::tiling::{sliding_windows, Patch, SubImageSpec, PATCH_SIZE};

/// Strides of the default sweep.
pub const DEFAULT_STRIDES: [usize; 4] = [64, 32, 16, 4];

/// Windows evaluated per inference call.
const WINDOW_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct ReliabilityMap {
    height: usize,
    width: usize,
    prob: Vec<f64>,
    coverage: Vec<u32>,
    pub scanner: usize,
    pub stride: usize,
}

impl ReliabilityMap {
    /// Averages window probabilities into pixels. Windows are accumulated in
    /// the given order with double-precision sums.
    pub fn from_windows(
        height: usize,
        width: usize,
        windows: &[SubImageSpec],
        probs: &[f64],
        scanner: usize,
        stride: usize,
    ) -> Result<Self> {
        if windows.len() != probs.len() {
            return Err(Error::Shape(format!(
                "{} windows but {} probabilities",
                windows.len(),
                probs.len()
            )));
        }
        let mut sum = vec![0.0f64; height * width];
        let mut coverage = vec![0u32; height * width];
        for (w, &p) in windows.iter().zip(probs) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!("window probability {p} outside [0, 1]")));
            }
            if !w.fits_in(height, width) {
                return Err(Error::Tiling(format!("window {w:?} outside the {height}x{width} image")));
            }
            for r in w.row0..w.row0 + w.n_rows {
                let row = r * width;
                for c in w.col0..w.col0 + w.n_cols {
                    sum[row + c] += p;
                    coverage[row + c] += 1;
                }
            }
        }
        if coverage.iter().any(|&c| c == 0) {
            return Err(Error::Tiling("some pixels are not covered by any window".into()));
        }
        let prob = sum.iter().zip(&coverage).map(|(s, &n)| s / n as f64).collect();
        Ok(ReliabilityMap {
            height,
            width,
            prob,
            coverage,
            scanner,
            stride,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn prob(&self, row: usize, col: usize) -> f64 {
        self.prob[row * self.width + col]
    }

    pub fn coverage(&self, row: usize, col: usize) -> u32 {
        self.coverage[row * self.width + col]
    }

    pub fn probs(&self) -> &[f64] {
        &self.prob
    }

    pub fn coverages(&self) -> &[u32] {
        &self.coverage
    }

    /// Mean reliability inside and outside `mask`.
    pub fn mean_inside_outside(&self, mask: &Mask) -> Result<(f64, f64)> {
        mask.check_shape(self.height, self.width)?;
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (p, &m) in self.prob.iter().zip(&mask.bits) {
            if m {
                si += p;
                ni += 1;
            } else {
                so += p;
                no += 1;
            }
        }
        Ok((si / ni.max(1) as f64, so / no.max(1) as f64))
    }
}

/// Probability of class `scanner` for every window, in window order.
pub fn window_probabilities(
    image: &ImageRgb,
    weights: &NetworkWeights,
    windows: &[SubImageSpec],
    scanner: usize,
    exec: &Exec,
) -> Result<Vec<f64>> {
    if scanner >= weights.num_classes() {
        return Err(Error::Label(format!("scanner {scanner} is not an output class")));
    }
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(WINDOW_CHUNK) {
        let patches = chunk
            .iter()
            .map(|w| Patch::from_image(image, (w.row0, w.col0), "").map(|p| p.pixels))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageRgb> = patches.iter().collect();
        out.extend(weights.predict(&refs, exec)?.iter().map(|p| p.get(scanner)));
    }
    Ok(out)
}

/// Reliability map against a given scanner class.
pub fn reliability_map_for(
    image: &ImageRgb,
    weights: &NetworkWeights,
    stride: usize,
    scanner: usize,
    exec: &Exec,
) -> Result<ReliabilityMap> {
    if stride > PATCH_SIZE {
        return Err(Error::Parameter(format!(
            "stride {stride} exceeds the {PATCH_SIZE}-pixel window and would leave pixels uncovered"
        )));
    }
    let windows = sliding_windows(image.height(), image.width(), PATCH_SIZE, stride)?;
    let probs = window_probabilities(image, weights, &windows, scanner, exec)?;
    ReliabilityMap::from_windows(image.height(), image.width(), &windows, &probs, scanner, stride)
}

/// Scanner voted by the non-overlapping 64x64 tiles of the image.
pub fn voted_scanner(image: &ImageRgb, weights: &NetworkWeights, exec: &Exec) -> Result<usize> {
    majority_vote(&classify_patches(image, weights, PATCH_SIZE, PATCH_SIZE, 0, exec)?)
}

/// Reliability map against the scanner voted for the whole image.
pub fn reliability_map(image: &ImageRgb, weights: &NetworkWeights, stride: usize, exec: &Exec) -> Result<ReliabilityMap> {
    if stride < 1 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    let scanner = voted_scanner(image, weights, exec)?;
    reliability_map_for(image, weights, stride, scanner, exec)
}

/// Diverging blue-to-red table: entry 0 is dark blue (probability 0), entry
/// 255 dark red (probability 1), entry 128 the near-white midpoint. Built by
/// linear interpolation between eleven anchor colours.
pub fn heatmap_lut() -> &'static [[u8; 3]; 256] {
    static LUT: OnceLock<[[u8; 3]; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        const ANCHORS: [[f64; 3]; 11] = [
            [5.0, 48.0, 97.0],
            [33.0, 102.0, 172.0],
            [67.0, 147.0, 195.0],
            [146.0, 197.0, 222.0],
            [209.0, 229.0, 240.0],
            [247.0, 247.0, 247.0],
            [253.0, 219.0, 199.0],
            [244.0, 165.0, 130.0],
            [214.0, 96.0, 77.0],
            [178.0, 24.0, 43.0],
            [103.0, 0.0, 31.0],
        ];
        let mut lut = [[0u8; 3]; 256];
        for (i, entry) in lut.iter_mut().enumerate() {
            let t = i as f64 / 255.0 * 10.0;
            let k = (t.floor() as usize).min(9);
            let f = t - k as f64;
            for c in 0..3 {
                entry[c] = (ANCHORS[k][c] + (ANCHORS[k + 1][c] - ANCHORS[k][c]) * f).round() as u8;
            }
        }
        lut
    })
}

/// LUT index of a probability: `round(255 * p)`, clamped.
pub fn lut_index(p: f64) -> usize {
    (p.clamp(0.0, 1.0) * 255.0).round() as usize
}

pub fn render_heatmap(map: &ReliabilityMap) -> ImageRgb {
    let lut = heatmap_lut();
    ImageRgb::from_fn(map.height, map.width, |r, c| lut[lut_index(map.prob(r, c))])
}

/// Binary pixel grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(f(r, c));
            }
        }
        Mask { height, width, bits }
    }

    pub fn from_rect(height: usize, width: usize, rect: &SubImageSpec) -> Self {
        Mask::from_fn(height, width, |r, c| rect.contains(r, c))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    /// 1-bit grayscale PNG, white = set.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut writer = enc.write_header().map_err(|e| Error::Encode(e.to_string()))?;
            let stride = self.width.div_ceil(8);
            let mut data = vec![0u8; stride * self.height];
            for r in 0..self.height {
                for c in 0..self.width {
                    if self.get(r, c) {
                        data[r * stride + c / 8] |= 0x80 >> (c % 8);
                    }
                }
            }
            writer.write_image_data(&data).map_err(|e| Error::Encode(e.to_string()))?;
        }
        Ok(out)
    }

    /// Reads any PNG; pixels with luma >= 128 are set.
    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Format(format!("mask png: {e}")))?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask::from_fn(h as usize, w as usize, |r, c| img.get_pixel(c as u32, r as u32)[0] >= 128))
    }
}

/// Marks pixels whose reliability is below `tau` as suspicious.
pub fn threshold_map(map: &ReliabilityMap, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Parameter(format!("threshold {tau} must lie in (0, 1)")));
    }
    Ok(Mask {
        height: map.height,
        width: map.width,
        bits: map.prob.iter().map(|&p| p < tau).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub iou: f64,
    pub f1: f64,
}

/// Pixel IoU and F1. Two empty masks score 1.0 on both.
pub fn localization_score(mask: &Mask, truth: &Mask) -> Result<LocalizationScore> {
    mask.check_shape(truth.height, truth.width)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&m, &t) in mask.bits.iter().zip(&truth.bits) {
        match (m, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(LocalizationScore { iou: 1.0, f1: 1.0 });
    }
    Ok(LocalizationScore {
        iou: tp as f64 / (tp + fp + fneg) as f64,
        f1: 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64,
    })
}

const MAP_MAGIC: &[u8; 8] = b"SCANRMAP";
const MAP_VERSION: u32 = 1;

/// Binary map file: magic, version, height, width, stride, scanner id, hash
/// length (all little-endian `u32`), the checkpoint hash bytes, then the
/// probabilities as `f64` and the coverage counts as `u32`, row-major.
pub fn encode_map(map: &ReliabilityMap, checkpoint_hash: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + checkpoint_hash.len() + map.prob.len() * 12);
    out.extend_from_slice(MAP_MAGIC);
    for v in [
        MAP_VERSION,
        map.height as u32,
        map.width as u32,
        map.stride as u32,
        map.scanner as u32,
        checkpoint_hash.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(checkpoint_hash.as_bytes());
    for p in &map.prob {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for c in &map.coverage {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

/// Inverse of [`encode_map`]; returns the map and the checkpoint hash.
pub fn decode_map(bytes: &[u8]) -> Result<(ReliabilityMap, String)> {
    let bad = |what: &str| Error::Format(format!("map file: {what}"));
    if bytes.len() < 32 || &bytes[..8] != MAP_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != MAP_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (height, width, stride, scanner, hash_len) = (word(1), word(2), word(3), word(4), word(5));
    let n = height * width;
    let start = 32 + hash_len;
    if bytes.len() != start + 12 * n {
        return Err(bad("length does not match the header"));
    }
    let hash = String::from_utf8(bytes[32..start].to_vec()).map_err(|_| bad("hash is not text"))?;
    let prob = bytes[start..start + 8 * n]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let coverage = bytes[start + 8 * n..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        ReliabilityMap {
            height,
            width,
            prob,
            coverage,
            scanner,
            stride,
        },
        hash,
    ))
}

pub fn save_map(path: &Path, map: &ReliabilityMap, checkpoint_hash: &str) -> Result<()> {
    write_file(path, &encode_map(map, checkpoint_hash))
}

pub fn load_map(path: &Path) -> Result<(ReliabilityMap, String)> {
    decode_map(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rect(row0: usize, col0: usize, n_rows: usize, n_cols: usize) -> SubImageSpec {
        SubImageSpec {
            row0,
            col0,
            n_rows,
            n_cols,
        }
    }

    #[test]
    fn single_window_map() {
        let w = sliding_windows(64, 64, 64, 4).unwrap();
        let m = ReliabilityMap::from_windows(64, 64, &w, &[0.7], 0, 4).unwrap();
        assert!(m.probs().iter().all(|&p| p == 0.7));
        assert!(m.coverages().iter().all(|&c| c == 1));
    }

    #[test]
    fn disjoint_and_overlapping_windows() {
        let w = sliding_windows(64, 128, 64, 64).unwrap();
        let m = ReliabilityMap::from_windows(64, 128, &w, &[0.4, 0.8], 0, 64).unwrap();
        assert_eq!(m.prob(10, 63), 0.4);
        assert_eq!(m.prob(10, 64), 0.8);

        let w = sliding_windows(64, 96, 64, 32).unwrap();
        assert_eq!(w.iter().map(|w| w.col0).collect::<Vec<_>>(), vec![0, 32]);
        let m = ReliabilityMap::from_windows(64, 96, &w, &[0.2, 0.9], 0, 32).unwrap();
        assert_abs_diff_eq!(m.prob(0, 40), 0.55, epsilon = 1e-12);
        assert_eq!(m.prob(0, 31), 0.2);
        assert_eq!(m.prob(0, 64), 0.9);
        assert_eq!(m.coverage(5, 32), 2);
    }

    #[test]
    fn uncovered_pixels_are_rejected() {
        let w = [rect(0, 0, 64, 64)];
        assert!(ReliabilityMap::from_windows(64, 65, &w, &[0.5], 0, 64).is_err());
        assert!(ReliabilityMap::from_windows(64, 64, &w, &[1.5], 0, 64).is_err());
    }

    #[test]
    fn heatmap_endpoints() {
        let lut = heatmap_lut();
        assert_eq!(lut[0], [5, 48, 97]);
        assert_eq!(lut[255], [103, 0, 31]);
        assert_eq!(lut_index(0.5), 128);
        let w = sliding_windows(64, 64, 64, 64).unwrap();
        for (p, colour) in [(1.0, lut[255]), (0.0, lut[0]), (0.5, lut[128])] {
            let m = ReliabilityMap::from_windows(64, 64, &w, &[p], 0, 64).unwrap();
            let img = render_heatmap(&m);
            assert!((0..64).all(|r| img.pixel(r, r) == colour));
        }
    }

    #[test]
    fn threshold_examples() {
        let w = sliding_windows(128, 128, 64, 64).unwrap();
        let hi = ReliabilityMap::from_windows(128, 128, &w, &[0.9; 4], 0, 64).unwrap();
        assert_eq!(threshold_map(&hi, 0.5).unwrap().count(), 0);
        let lo = ReliabilityMap::from_windows(128, 128, &w, &[0.1; 4], 0, 64).unwrap();
        assert_eq!(threshold_map(&lo, 0.5).unwrap().count(), 128 * 128);
        let one = ReliabilityMap::from_windows(128, 128, &w, &[0.9, 0.2, 0.9, 0.9], 0, 64).unwrap();
        let mask = threshold_map(&one, 0.5).unwrap();
        assert_eq!(mask, Mask::from_rect(128, 128, &w[1]));
        assert!(threshold_map(&one, 1.0).is_err());
        assert!(threshold_map(&one, 0.0).is_err());
    }

    #[test]
    fn localization_examples() {
        let a = Mask::from_rect(100, 100, &rect(0, 0, 20, 20));
        assert_eq!(localization_score(&a, &a).unwrap(), LocalizationScore { iou: 1.0, f1: 1.0 });
        let b = Mask::from_rect(100, 100, &rect(50, 50, 20, 20));
        assert_eq!(localization_score(&a, &b).unwrap().iou, 0.0);
        let half = Mask::from_rect(100, 100, &rect(0, 10, 20, 20));
        let s = localization_score(&a, &half).unwrap();
        assert_abs_diff_eq!(s.iou, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.f1, 0.5, epsilon = 1e-12);
        let e = Mask::empty(100, 100);
        assert_eq!(localization_score(&e, &e).unwrap().iou, 1.0);
        assert!(localization_score(&e, &Mask::empty(10, 10)).is_err());
    }

    #[test]
    fn mask_png_roundtrip() {
        let m = Mask::from_fn(13, 21, |r, c| (r * 7 + c) % 3 == 0);
        let png = m.to_png().unwrap();
        assert_eq!(Mask::from_png(&png).unwrap(), m);
    }

    #[test]
    fn map_file_roundtrip() {
        let w = sliding_windows(64, 96, 64, 32).unwrap();
        let m = ReliabilityMap::from_windows(64, 96, &w, &[0.25, 0.5], 3, 32).unwrap();
        let bytes = encode_map(&m, "abc123");
        let (back, hash) = decode_map(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(hash, "abc123");
        assert!(decode_map(&bytes[..bytes.len() - 1]).is_err());
    }
}
