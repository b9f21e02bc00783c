//! Images on disk, dataset manifests and the per-label train/val/test split.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageEncoder};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{rng_for, stream};

/// Smallest image side accepted by the pipeline (one network patch).
pub const MIN_SIDE: usize = 64;

/// An 8-bit, 3-channel raster stored row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageRgb {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl fmt::Debug for ImageRgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageRgb({}x{})", self.height, self.width)
    }
}

impl ImageRgb {
    /// Wraps raw interleaved RGB bytes. Any size is accepted here; the
    /// pipeline entry points enforce [`MIN_SIDE`].
    pub fn from_raw(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes cannot hold a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(ImageRgb {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        ImageRgb {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        ImageRgb {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Fails unless the image is at least `MIN_SIDE` in both dimensions.
    pub fn ensure_min_size(&self) -> Result<()> {
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::ImageTooSmall {
                height: self.height,
                width: self.width,
                min: MIN_SIDE,
            });
        }
        Ok(())
    }

    /// Copies the `n_rows` x `n_cols` block whose top-left corner is
    /// (`row0`, `col0`).
    pub fn crop(&self, row0: usize, col0: usize, n_rows: usize, n_cols: usize) -> Result<ImageRgb> {
        if row0 + n_rows > self.height || col0 + n_cols > self.width {
            return Err(Error::Geometry(format!(
                "crop {n_rows}x{n_cols} at ({row0},{col0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(n_rows * n_cols * 3);
        for r in row0..row0 + n_rows {
            let start = (r * self.width + col0) * 3;
            data.extend_from_slice(&self.data[start..start + n_cols * 3]);
        }
        Ok(ImageRgb {
            height: n_rows,
            width: n_cols,
            data,
        })
    }

    /// Overwrites the block at (`row0`, `col0`) with `src`.
    pub fn paste(&mut self, src: &ImageRgb, row0: usize, col0: usize) -> Result<()> {
        if row0 + src.height > self.height || col0 + src.width > self.width {
            return Err(Error::Geometry(format!(
                "paste {}x{} at ({row0},{col0}) exceeds {}x{} image",
                src.height, src.width, self.height, self.width
            )));
        }
        for r in 0..src.height {
            let dst = ((row0 + r) * self.width + col0) * 3;
            let s = r * src.width * 3;
            self.data[dst..dst + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    fn to_dynamic(&self) -> image::RgbImage {
        image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length checked at construction")
    }
}

/// Decodes a JPEG or PNG file; grayscale sources are replicated to three
/// channels.
pub fn load_image(path: &Path) -> Result<ImageRgb> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = decode_image_bytes(&bytes).map_err(|e| match e {
        Error::Decode { reason, .. } => Error::Decode {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    img.ensure_min_size()?;
    Ok(img)
}

/// Decodes in-memory JPEG or PNG bytes without the minimum-size check.
pub fn decode_image_bytes(bytes: &[u8]) -> Result<ImageRgb> {
    let dynamic = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: PathBuf::from("<memory>"),
        reason: e.to_string(),
    })?;
    let rgb = dynamic.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageRgb::from_raw(h as usize, w as usize, rgb.into_raw())
}

pub fn encode_jpeg(img: &ImageRgb, quality: u8) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    JpegEncoder::new_with_quality(&mut out, quality)
        .write_image(
            &img.data,
            img.width as u32,
            img.height as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out)
}

pub fn encode_png(img: &ImageRgb) -> Result<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    img.to_dynamic()
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

/// Round trip through the JPEG codec at `quality`.
pub fn jpeg_roundtrip(img: &ImageRgb, quality: u8) -> Result<ImageRgb> {
    decode_image_bytes(&encode_jpeg(img, quality)?)
}

/// Writes PNG for `.png` paths and JPEG (at `jpeg_quality`) for `.jpg`/`.jpeg`.
pub fn save_image(img: &ImageRgb, path: &Path, jpeg_quality: u8) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let bytes = match ext.as_deref() {
        Some("png") => encode_png(img)?,
        Some("jpg") | Some("jpeg") => encode_jpeg(img, jpeg_quality)?,
        _ => {
            return Err(Error::Input(format!(
                "{}: unsupported image extension (use .png, .jpg or .jpeg)",
                path.display()
            )))
        }
    };
    write_file(path, &bytes)
}

/// Creates parent directories as needed.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Scanner model label: a dense id plus its human readable name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScannerLabel {
    pub id: usize,
    pub name: String,
}

/// Bijection between dense label ids `0..len` and scanner names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelRegistry {
    names: Vec<String>,
}

impl LabelRegistry {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Label(format!("duplicate scanner name {n:?}")));
            }
        }
        Ok(LabelRegistry { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn label(&self, id: usize) -> Result<ScannerLabel> {
        self.names
            .get(id)
            .map(|name| ScannerLabel {
                id,
                name: name.clone(),
            })
            .ok_or_else(|| Error::Label(format!("label id {id} outside 0..{}", self.names.len())))
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Header line of the manifest file.
#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    seed: u64,
    label_names: Vec<String>,
}

const MANIFEST_FORMAT: &str = "scanid-manifest";
const MANIFEST_VERSION: u32 = 1;

/// A labelled, split image list.
///
/// On disk: one JSON header line (format tag, version, seed, label names)
/// followed by one `path<TAB>label_id<TAB>split` record per line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub labels: LabelRegistry,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    pub fn to_text(&self) -> Result<String> {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            seed: self.seed,
            label_names: self.labels.names().to_vec(),
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Manifest(e.to_string()))?;
        out.push('\n');
        for e in &self.entries {
            let p = e
                .path
                .to_str()
                .ok_or_else(|| Error::Manifest(format!("non-UTF-8 path {}", e.path.display())))?;
            if p.contains(['\t', '\n', '\r']) {
                return Err(Error::Manifest(format!("path {p:?} contains a tab or newline")));
            }
            if e.label >= self.labels.len() {
                return Err(Error::Manifest(format!("entry {p} has unknown label {}", e.label)));
            }
            out.push_str(&format!("{p}\t{}\t{}\n", e.label, e.split));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest("empty manifest".into()))?;
        let header: ManifestHeader = serde_json::from_str(header_line)
            .map_err(|e| Error::Manifest(format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Manifest(format!("unexpected format tag {:?}", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", header.version)));
        }
        let labels = LabelRegistry::new(header.label_names)?;
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Manifest(format!(
                    "line {}: expected 3 tab-separated fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let label: usize = fields[1]
                .parse()
                .map_err(|_| Error::Manifest(format!("line {}: bad label {:?}", lineno + 2, fields[1])))?;
            if label >= labels.len() {
                return Err(Error::Manifest(format!("line {}: unknown label {label}", lineno + 2)));
            }
            entries.push(ManifestEntry {
                path: PathBuf::from(fields[0]),
                label,
                split: fields[2].parse()?,
            });
        }
        Ok(DatasetManifest {
            labels,
            seed: header.seed,
            entries,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Resolves an entry path against the directory holding the manifest.
    pub fn resolve(&self, base_dir: &Path, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base_dir.join(&entry.path)
        }
    }

    /// Checks that every referenced file decodes and that splits are disjoint.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.path) {
                return Err(Error::Manifest(format!("{} listed twice", e.path.display())));
            }
            load_image(&self.resolve(base_dir, e))?;
        }
        Ok(())
    }
}

/// Train/val/test proportions; only their ratios matter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 6.0,
            val: 1.0,
            test: 3.0,
        }
    }
}

/// Per-label split sizes for `k` images: train and val rounded to nearest,
/// test takes the remainder, then every split is topped up to one image by
/// taking from the largest other split (test wins ties, then train).
pub fn split_counts(k: usize, ratios: SplitRatios) -> Result<[usize; 3]> {
    if k < 3 {
        return Err(Error::Manifest(format!("need at least 3 images, got {k}")));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if !(ratios.train >= 0.0 && ratios.val >= 0.0 && ratios.test >= 0.0 && total > 0.0) {
        return Err(Error::Parameter(format!("invalid split ratios {ratios:?}")));
    }
    let train = ((ratios.train / total) * k as f64).round() as usize;
    let val = (((ratios.val / total) * k as f64).round() as usize).min(k - train.min(k));
    let train = train.min(k);
    let mut counts = [train, val, k - train - val];
    for target in 0..3 {
        while counts[target] == 0 {
            // donor preference on ties: test, then train, then val
            let donor = [2usize, 0, 1]
                .into_iter()
                .filter(|&d| d != target)
                .max_by_key(|&d| (counts[d], [1, 0, 2][d]))
                .expect("two candidates");
            counts[donor] -= 1;
            counts[target] += 1;
        }
    }
    Ok(counts)
}

/// Shuffles each label's images with a label-specific stream derived from
/// `seed` and cuts them into train/val/test. Label ids follow the map's
/// (sorted) key order. The result depends only on the input set and seed.
pub fn split_dataset(
    images_by_label: &BTreeMap<String, Vec<PathBuf>>,
    ratios: SplitRatios,
    seed: u64,
) -> Result<DatasetManifest> {
    let short: Vec<String> = images_by_label
        .iter()
        .filter(|(_, paths)| paths.len() < 3)
        .map(|(name, paths)| format!("{name} ({} images)", paths.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::Manifest(format!(
            "labels with fewer than 3 images: {}",
            short.join(", ")
        )));
    }
    let labels = LabelRegistry::new(images_by_label.keys().cloned().collect())?;
    let mut entries = Vec::new();
    for (id, paths) in images_by_label.values().enumerate() {
        let mut paths = paths.clone();
        paths.sort();
        paths.dedup();
        let counts = split_counts(paths.len(), ratios)?;
        let mut rng = rng_for(seed, &[stream::SPLIT, id as u64]);
        paths.shuffle(&mut rng);
        let mut it = paths.into_iter();
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for path in it.by_ref().take(n) {
                entries.push(ManifestEntry {
                    path,
                    label: id,
                    split,
                });
            }
        }
    }
    Ok(DatasetManifest {
        labels,
        seed,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts_follow_ratio() {
        assert_eq!(split_counts(20, SplitRatios::default()).unwrap(), [12, 2, 6]);
        assert_eq!(split_counts(60, SplitRatios::default()).unwrap(), [36, 6, 18]);
        assert_eq!(split_counts(3, SplitRatios::default()).unwrap(), [1, 1, 1]);
        assert_eq!(split_counts(4, SplitRatios::default()).unwrap(), [2, 1, 1]);
        assert!(split_counts(2, SplitRatios::default()).is_err());
    }

    #[test]
    fn split_rejects_small_labels_by_name() {
        let mut map = BTreeMap::new();
        map.insert("a".to_string(), vec![PathBuf::from("a1"), PathBuf::from("a2")]);
        map.insert(
            "b".to_string(),
            (0..5).map(|i| PathBuf::from(format!("b{i}"))).collect(),
        );
        map.insert("c".to_string(), vec![PathBuf::from("c1")]);
        let err = split_dataset(&map, SplitRatios::default(), 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a (2 images)") && msg.contains("c (1 images)"), "{msg}");
        assert!(!msg.contains("b ("));
    }

    #[test]
    fn manifest_text_roundtrip() {
        let mut map = BTreeMap::new();
        for name in ["flatbed_a", "flatbed_b"] {
            map.insert(
                name.to_string(),
                (0..20).map(|i| PathBuf::from(format!("{name}/{i:03}.jpg"))).collect(),
            );
        }
        let m = split_dataset(&map, SplitRatios::default(), 42).unwrap();
        assert_eq!(m.count(Split::Train), 24);
        assert_eq!(m.count(Split::Val), 4);
        assert_eq!(m.count(Split::Test), 12);
        let text = m.to_text().unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m);
        assert_eq!(split_dataset(&map, SplitRatios::default(), 42).unwrap().to_text().unwrap(), text);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(DatasetManifest::parse("").is_err());
        assert!(DatasetManifest::parse("{\"format\":\"x\",\"version\":1,\"seed\":0,\"label_names\":[]}\n").is_err());
        let hdr = "{\"format\":\"scanid-manifest\",\"version\":1,\"seed\":0,\"label_names\":[\"a\"]}\n";
        assert!(DatasetManifest::parse(&format!("{hdr}x.png\t1\ttrain\n")).is_err());
        assert!(DatasetManifest::parse(&format!("{hdr}x.png\t0\tholdout\n")).is_err());
        assert!(DatasetManifest::parse(&format!("{hdr}x.png\t0\ttrain\n")).is_ok());
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let img = ImageRgb::from_fn(70, 90, |r, c| [r as u8, c as u8, (r + c) as u8]);
        let block = img.crop(3, 5, 20, 30).unwrap();
        assert_eq!(block.pixel(0, 0), [3, 5, 8]);
        let mut canvas = ImageRgb::filled(70, 90, [0, 0, 0]);
        canvas.paste(&block, 3, 5).unwrap();
        assert_eq!(canvas.crop(3, 5, 20, 30).unwrap(), block);
        assert!(img.crop(60, 0, 20, 10).is_err());
    }
}
