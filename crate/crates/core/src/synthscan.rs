//! Synthetic flatbed scanners.
//!
//! Each simulated device has a multiplicative gain field (photo-response
//! non-uniformity), a short row-offset profile repeated down the page (the
//! line sensor sweeps the same scanline pattern over and over), white
//! readout noise and its own JPEG quality. A scan of `content` is
//! `JPEG_q(clip(content * gain + row_profile + noise))`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    decode_image_bytes, encode_jpeg, encode_png, load_image, split_dataset, write_file, DatasetManifest, ImageRgb,
    SplitRatios, MIN_SIDE,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{derive, rng_for, stream};

pub const DEFAULT_GAIN_STD: f64 = 0.02;
pub const DEFAULT_ROW_STD: f64 = 6.0;
pub const DEFAULT_READOUT_STD: f64 = 2.0;
/// Gain fields are generated at this size and tiled over larger scans.
pub const GAIN_FIELD_SIZE: usize = 256;
/// Row profile periods cycle through `MIN_ROW_PERIOD..MIN_ROW_PERIOD + ROW_PERIOD_COUNT`.
pub const MIN_ROW_PERIOD: usize = 2;
pub const ROW_PERIOD_COUNT: usize = 8;
pub const JPEG_QUALITY_RANGE: (u8, u8) = (70, 95);

/// Noise magnitudes of a simulated device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseLevels {
    /// Standard deviation of the multiplicative gain around 1.
    pub gain_std: f64,
    /// Standard deviation of the repeated row offsets (intensity units).
    pub row_std: f64,
    /// Standard deviation of white readout noise (intensity units).
    pub readout_std: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            gain_std: DEFAULT_GAIN_STD,
            row_std: DEFAULT_ROW_STD,
            readout_std: DEFAULT_READOUT_STD,
        }
    }
}

impl NoiseLevels {
    pub const ZERO: NoiseLevels = NoiseLevels {
        gain_std: 0.0,
        row_std: 0.0,
        readout_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gain_std", self.gain_std),
            ("row_std", self.row_std),
            ("readout_std", self.readout_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.gain_std >= 0.2 {
            return Err(Error::Parameter(format!(
                "gain_std {} would allow negative gains",
                self.gain_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerFingerprint {
    pub label: usize,
    pub seed: u64,
    pub levels: NoiseLevels,
    /// `GAIN_FIELD_SIZE` squared gains, row-major. Every row averages to 1.
    pub gain_field: Vec<f32>,
    /// One period of the row offsets; scanline `r` gets `row_profile[r % len]`.
    pub row_profile: Vec<f64>,
    pub jpeg_quality: u8,
}

impl ScannerFingerprint {
    pub fn gain(&self, row: usize, col: usize) -> f32 {
        self.gain_field[(row % GAIN_FIELD_SIZE) * GAIN_FIELD_SIZE + col % GAIN_FIELD_SIZE]
    }

    pub fn row_offset(&self, row: usize) -> f64 {
        self.row_profile[row % self.row_profile.len()]
    }

    pub fn row_period(&self) -> usize {
        self.row_profile.len()
    }
}

/// Scales `v` to zero mean and the given standard deviation (left at zero
/// when `std` is zero).
fn standardize(v: &mut [f64], std: f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd * std } else { 0.0 };
    }
}

/// Deterministic device for `(label, seed)`.
///
/// The row period is `MIN_ROW_PERIOD + (label + k) % ROW_PERIOD_COUNT` with
/// `k` drawn from the seed, so up to `ROW_PERIOD_COUNT` labels sharing a seed
/// get distinct periods. Everything else is drawn independently per label.
pub fn make_fingerprint(label: usize, seed: u64, levels: NoiseLevels) -> Result<ScannerFingerprint> {
    levels.validate()?;
    let offset = rng_for(seed, &[stream::FINGERPRINT]).random_range(0..ROW_PERIOD_COUNT);
    let mut rng = rng_for(seed, &[stream::FINGERPRINT, label as u64]);
    let n = GAIN_FIELD_SIZE;
    let mut gain_field = Vec::with_capacity(n * n);
    let mut row = vec![0.0; n];
    for _ in 0..n {
        for x in row.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        standardize(&mut row, 1.0);
        gain_field.extend(row.iter().map(|&z| (1.0 + levels.gain_std * z.clamp(-5.0, 5.0)) as f32));
    }
    let period = MIN_ROW_PERIOD + (label + offset) % ROW_PERIOD_COUNT;
    let mut row_profile: Vec<f64> = (0..period).map(|_| rng.sample(StandardNormal)).collect();
    standardize(&mut row_profile, levels.row_std);
    let jpeg_quality = rng.random_range(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1);
    Ok(ScannerFingerprint {
        label,
        seed,
        levels,
        gain_field,
        row_profile,
        jpeg_quality,
    })
}

/// The scan before JPEG coding.
pub fn render_raw(content: &ImageRgb, fp: &ScannerFingerprint, rng_seed: u64) -> Result<ImageRgb> {
    content.ensure_min_size()?;
    let mut rng = rng_for(rng_seed, &[stream::RENDER]);
    let noise = Normal::new(0.0, fp.levels.readout_std).map_err(|e| Error::Parameter(e.to_string()))?;
    let (h, w) = (content.height(), content.width());
    let mut out = Vec::with_capacity(h * w * 3);
    let src = content.as_raw();
    for r in 0..h {
        let offset = fp.row_offset(r);
        for c in 0..w {
            let g = fp.gain(r, c) as f64;
            for k in 0..3 {
                let mut v = src[(r * w + c) * 3 + k] as f64 * g + offset;
                if fp.levels.readout_std > 0.0 {
                    v += noise.sample(&mut rng);
                }
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageRgb::from_raw(h, w, out)
}

/// Encoded scan: JPEG at the device quality, or PNG when `lossless`.
pub fn render_scan_bytes(content: &ImageRgb, fp: &ScannerFingerprint, rng_seed: u64, lossless: bool) -> Result<Vec<u8>> {
    let raw = render_raw(content, fp, rng_seed)?;
    if lossless {
        encode_png(&raw)
    } else {
        encode_jpeg(&raw, fp.jpeg_quality)
    }
}

pub fn render_scan(content: &ImageRgb, fp: &ScannerFingerprint, rng_seed: u64, lossless: bool) -> Result<ImageRgb> {
    if lossless {
        return render_raw(content, fp, rng_seed);
    }
    decode_image_bytes(&render_scan_bytes(content, fp, rng_seed, false)?)
}

/// Peak signal-to-noise ratio in dB (infinite for identical images).
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape("PSNR needs images of equal size".into()));
    }
    let mse = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.as_raw().len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * t)
}

fn to_u8(c: [f64; 3]) -> [u8; 3] {
    c.map(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// A document-like page: a linear colour gradient, a few flat rectangles
/// and some lines of glyph-like blocks.
pub fn procedural_content(height: usize, width: usize, seed: u64) -> ImageRgb {
    let mut rng = rng_for(seed, &[stream::CONTENT]);
    let mut colour = |lo: f64, hi: f64| [0; 3].map(|_: u8| rng.random_range(lo..hi));
    let (c0, c1) = (colour(40.0, 220.0), colour(40.0, 220.0));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let proj = |r: usize, c: usize| ca * c as f64 / width as f64 + sa * r as f64 / height as f64;
    let corners = [proj(0, 0), proj(0, width - 1), proj(height - 1, 0), proj(height - 1, width - 1)];
    let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut img = ImageRgb::from_fn(height, width, |r, c| to_u8(lerp(c0, c1, (proj(r, c) - lo) / (hi - lo + 1e-9))));

    let fill = |img: &mut ImageRgb, r0: usize, c0: usize, h: usize, w: usize, rgb: [u8; 3]| {
        for r in r0..(r0 + h).min(height) {
            for c in c0..(c0 + w).min(width) {
                img.set_pixel(r, c, rgb);
            }
        }
    };
    for _ in 0..rng.random_range(2..6) {
        let r0 = rng.random_range(0..height - height / 8);
        let c0 = rng.random_range(0..width - width / 8);
        let h = rng.random_range(height / 8..=height / 2);
        let w = rng.random_range(width / 8..=width / 2);
        let rgb = to_u8([0; 3].map(|_: u8| rng.random_range(30.0..230.0)));
        fill(&mut img, r0, c0, h, w, rgb);
    }
    for _ in 0..rng.random_range(0..4) {
        let r0 = rng.random_range(0..height - 12);
        let mut c = rng.random_range(0..width / 2);
        let ink = to_u8([0; 3].map(|_: u8| rng.random_range(10.0..80.0)));
        while c + 10 < width {
            let gw = rng.random_range(3..9);
            let gh = rng.random_range(6..12);
            fill(&mut img, r0, c, gh, gw, ink);
            c += gw + rng.random_range(2..5);
        }
    }
    img
}

/// Where page content comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentSource {
    Procedural,
    /// Every `.png`/`.jpg`/`.jpeg` file in the directory (sorted by name),
    /// reused cyclically.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_scanners: usize,
    pub images_per_scanner: usize,
    pub seed: u64,
    /// Size of procedurally generated pages.
    pub height: usize,
    pub width: usize,
    pub levels: NoiseLevels,
    pub content: ContentSource,
    pub split: SplitRatios,
    /// Write PNG instead of device-quality JPEG.
    pub lossless: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scanners: 8,
            images_per_scanner: 60,
            seed: 7,
            height: 256,
            width: 256,
            levels: NoiseLevels::default(),
            content: ContentSource::Procedural,
            split: SplitRatios::default(),
            lossless: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_scanners < 2 {
            return Err(Error::Parameter(format!("need at least 2 scanners, got {}", self.num_scanners)));
        }
        if self.images_per_scanner < 10 {
            return Err(Error::Parameter(format!(
                "need at least 10 images per scanner, got {}",
                self.images_per_scanner
            )));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::Parameter(format!(
                "pages must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        self.levels.validate()
    }
}

pub fn scanner_name(label: usize) -> String {
    format!("scanner_{label:02}")
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FINGERPRINTS_FILE: &str = "fingerprints.json";

/// Device summary written next to the manifest (fields omitted).
#[derive(Serialize)]
struct FingerprintSummary<'a> {
    name: String,
    label: usize,
    seed: u64,
    levels: NoiseLevels,
    row_period: usize,
    row_profile: &'a [f64],
    jpeg_quality: u8,
}

fn content_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Input(format!("no .png/.jpg/.jpeg content images in {}", dir.display())));
    }
    Ok(files)
}

/// Renders `num_scanners * images_per_scanner` scans into `out_dir`
/// (`scanner_XX/img_YYY.jpg`), splits them per label and writes the
/// manifest plus a device summary. Image `i` of scanner `s` uses content
/// item `s * images_per_scanner + i`.
pub fn build_synthetic_dataset(cfg: &SynthConfig, out_dir: &Path, exec: &Exec) -> Result<DatasetManifest> {
    cfg.validate()?;
    let files = match &cfg.content {
        ContentSource::Procedural => None,
        ContentSource::Directory(dir) => Some(content_files(dir)?),
    };
    let fingerprints = (0..cfg.num_scanners)
        .map(|l| make_fingerprint(l, cfg.seed, cfg.levels))
        .collect::<Result<Vec<_>>>()?;
    let ext = if cfg.lossless { "png" } else { "jpg" };
    let total = cfg.num_scanners * cfg.images_per_scanner;
    let rel_paths = exec.try_map(total, |k| {
        let (label, i) = (k / cfg.images_per_scanner, k % cfg.images_per_scanner);
        let content = match &files {
            None => procedural_content(cfg.height, cfg.width, derive(cfg.seed, &[stream::CONTENT, k as u64])),
            Some(f) => load_image(&f[k % f.len()])?,
        };
        let bytes = render_scan_bytes(&content, &fingerprints[label], derive(cfg.seed, &[stream::RENDER, k as u64]), cfg.lossless)?;
        let rel = PathBuf::from(scanner_name(label)).join(format!("img_{i:03}.{ext}"));
        write_file(&out_dir.join(&rel), &bytes)?;
        Ok(rel)
    })?;
    let mut by_label: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for (k, rel) in rel_paths.into_iter().enumerate() {
        by_label.entry(scanner_name(k / cfg.images_per_scanner)).or_default().push(rel);
    }
    let manifest = split_dataset(&by_label, cfg.split, cfg.seed)?;
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    let summary: Vec<FingerprintSummary> = fingerprints
        .iter()
        .map(|fp| FingerprintSummary {
            name: scanner_name(fp.label),
            label: fp.label,
            seed: fp.seed,
            levels: fp.levels,
            row_period: fp.row_period(),
            row_profile: &fp.row_profile,
            jpeg_quality: fp.jpeg_quality,
        })
        .collect();
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Encode(e.to_string()))?;
    write_file(&out_dir.join(FINGERPRINTS_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Gray-level high-pass residual: the image minus its 3x3 box blur
/// (interior pixels only, row-major).
pub fn noise_residual(img: &ImageRgb) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let gray: Vec<f64> = img.as_raw().chunks(3).map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0).collect();
    let mut out = Vec::with_capacity(h.saturating_sub(2) * w.saturating_sub(2));
    for r in 1..h.saturating_sub(1) {
        for c in 1..w.saturating_sub(1) {
            let mut s = 0.0;
            for dr in 0..3 {
                for dc in 0..3 {
                    s += gray[(r + dr - 1) * w + c + dc - 1];
                }
            }
            out.push(gray[r * w + c] - s / 9.0);
        }
    }
    out
}

/// Pearson correlation of two equally long sequences.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt().max(f64::MIN_POSITIVE)
}
