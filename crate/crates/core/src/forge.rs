//! Copy-move and splice forgeries with exact ground-truth masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{jpeg_roundtrip, ImageRgb};
use crate::error::{Error, Result};
use crate::relmap::Mask;
use crate::seed::rng_for;
use crate::tiling::{SubImageSpec, PATCH_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgeryKind {
    SelfCopy,
    MultiSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub hflip: bool,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        hflip: false,
        scale_x: 1.0,
        scale_y: 1.0,
    };

    /// The transform that maps `src` onto `dst`.
    pub fn fit(src: &SubImageSpec, dst: &SubImageSpec, hflip: bool) -> Self {
        Transform {
            hflip,
            scale_x: dst.n_cols as f64 / src.n_cols as f64,
            scale_y: dst.n_rows as f64 / src.n_rows as f64,
        }
    }
}

/// Everything about a forgery except the pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeryMeta {
    pub kind: ForgeryKind,
    pub src_rect: SubImageSpec,
    pub dst_rect: SubImageSpec,
    pub transform: Transform,
    pub donor: Option<String>,
    pub jpeg_quality: Option<u8>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForgeryRecord {
    pub forged: ImageRgb,
    pub truth_mask: Mask,
    pub meta: ForgeryMeta,
}

impl ForgeryRecord {
    /// JPEG-recompresses the whole forged image.
    pub fn recompress(mut self, quality: u8) -> Result<Self> {
        self.forged = jpeg_roundtrip(&self.forged, quality)?;
        self.meta.jpeg_quality = Some(quality);
        Ok(self)
    }
}

fn check_rect(rect: &SubImageSpec, img: &ImageRgb, what: &str) -> Result<()> {
    if rect.n_rows == 0 || rect.n_cols == 0 || !rect.fits_in(img.height(), img.width()) {
        return Err(Error::Geometry(format!(
            "{what} rectangle {rect:?} is empty or outside the {}x{} image",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

fn check_dst(dst: &SubImageSpec, img: &ImageRgb) -> Result<()> {
    check_rect(dst, img, "destination")?;
    if dst.n_rows < PATCH_SIZE || dst.n_cols < PATCH_SIZE {
        return Err(Error::Geometry(format!(
            "destination {}x{} is smaller than {PATCH_SIZE}x{PATCH_SIZE}",
            dst.n_rows, dst.n_cols
        )));
    }
    Ok(())
}

/// Bilinear resize (pixel centres aligned, edges clamped).
pub fn resize_bilinear(src: &ImageRgb, height: usize, width: usize) -> ImageRgb {
    let (sh, sw) = (src.height(), src.width());
    let coord = |i: usize, out: usize, inp: usize| {
        let x = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(inp - 1), x - x0 as f64)
    };
    ImageRgb::from_fn(height, width, |r, c| {
        let (r0, r1, fr) = coord(r, height, sh);
        let (c0, c1, fc) = coord(c, width, sw);
        let (a, b, d, e) = (src.pixel(r0, c0), src.pixel(r0, c1), src.pixel(r1, c0), src.pixel(r1, c1));
        let mut out = [0u8; 3];
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - fc) + b[k] as f64 * fc;
            let bottom = d[k] as f64 * (1.0 - fc) + e[k] as f64 * fc;
            out[k] = (top * (1.0 - fr) + bottom * fr).round() as u8;
        }
        out
    })
}

pub fn hflip(img: &ImageRgb) -> ImageRgb {
    ImageRgb::from_fn(img.height(), img.width(), |r, c| img.pixel(r, img.width() - 1 - c))
}

/// Copies `src_rect` of the image (optionally mirrored, then resampled to
/// the destination size) over `dst_rect`.
pub fn self_copy_move(
    image: &ImageRgb,
    src_rect: SubImageSpec,
    dst_rect: SubImageSpec,
    transform: Transform,
) -> Result<ForgeryRecord> {
    check_rect(&src_rect, image, "source")?;
    check_dst(&dst_rect, image)?;
    let implied = Transform::fit(&src_rect, &dst_rect, transform.hflip);
    if (implied.scale_x - transform.scale_x).abs() * src_rect.n_cols as f64 >= 1.0
        || (implied.scale_y - transform.scale_y).abs() * src_rect.n_rows as f64 >= 1.0
    {
        return Err(Error::Geometry(format!(
            "scale ({}, {}) does not map the {}x{} source onto the {}x{} destination",
            transform.scale_y, transform.scale_x, src_rect.n_rows, src_rect.n_cols, dst_rect.n_rows, dst_rect.n_cols
        )));
    }
    let mut region = image.crop(src_rect.row0, src_rect.col0, src_rect.n_rows, src_rect.n_cols)?;
    if transform.hflip {
        region = hflip(&region);
    }
    if (region.height(), region.width()) != (dst_rect.n_rows, dst_rect.n_cols) {
        region = resize_bilinear(&region, dst_rect.n_rows, dst_rect.n_cols);
    }
    let mut forged = image.clone();
    forged.paste(&region, dst_rect.row0, dst_rect.col0)?;
    Ok(ForgeryRecord {
        forged,
        truth_mask: Mask::from_rect(image.height(), image.width(), &dst_rect),
        meta: ForgeryMeta {
            kind: ForgeryKind::SelfCopy,
            src_rect,
            dst_rect,
            transform,
            donor: None,
            jpeg_quality: None,
            warnings: Vec::new(),
        },
    })
}

/// A donor image for a splice.
pub struct Donor<'a> {
    pub image: &'a ImageRgb,
    pub id: String,
    pub label: Option<usize>,
}

/// Pastes `src_rect` of the donor over `dst_rect` of the image (same size).
/// A donor with the same scanner label is allowed but noted in the warnings.
pub fn splice_from_other(
    image: &ImageRgb,
    image_label: Option<usize>,
    donor: &Donor<'_>,
    src_rect: SubImageSpec,
    dst_rect: SubImageSpec,
) -> Result<ForgeryRecord> {
    check_rect(&src_rect, donor.image, "donor source")?;
    check_dst(&dst_rect, image)?;
    if (src_rect.n_rows, src_rect.n_cols) != (dst_rect.n_rows, dst_rect.n_cols) {
        return Err(Error::Geometry("splice source and destination sizes differ".into()));
    }
    let mut warnings = Vec::new();
    if let (Some(a), Some(b)) = (image_label, donor.label) {
        if a == b {
            warnings.push(format!("donor {} has the same scanner label {a} as the target", donor.id));
            log::warn!("{}", warnings[0]);
        }
    }
    let region = donor.image.crop(src_rect.row0, src_rect.col0, src_rect.n_rows, src_rect.n_cols)?;
    let mut forged = image.clone();
    forged.paste(&region, dst_rect.row0, dst_rect.col0)?;
    Ok(ForgeryRecord {
        forged,
        truth_mask: Mask::from_rect(image.height(), image.width(), &dst_rect),
        meta: ForgeryMeta {
            kind: ForgeryKind::MultiSource,
            src_rect,
            dst_rect,
            transform: Transform::IDENTITY,
            donor: Some(donor.id.clone()),
            jpeg_quality: None,
            warnings,
        },
    })
}

/// Ranges for randomly placed forgeries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub min_side: usize,
    pub max_side: usize,
    /// Stretch / compress factors for self copies.
    pub min_scale: f64,
    pub max_scale: f64,
    pub hflip_probability: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            min_side: 64,
            max_side: 128,
            min_scale: 0.75,
            max_scale: 1.5,
            hflip_probability: 0.5,
        }
    }
}

impl ForgeConfig {
    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.min_side < PATCH_SIZE || self.max_side < self.min_side {
            return Err(Error::Parameter(format!(
                "forged side range {}..={} must start at {PATCH_SIZE} or more",
                self.min_side, self.max_side
            )));
        }
        if self.min_side > height.min(width) {
            return Err(Error::Geometry(format!(
                "{height}x{width} image cannot hold a {0}x{0} forged region",
                self.min_side
            )));
        }
        if !(self.min_scale > 0.0 && self.max_scale >= self.min_scale) {
            return Err(Error::Parameter("scale range must be positive and ordered".into()));
        }
        Ok(())
    }
}

fn random_rect(rng: &mut impl Rng, height: usize, width: usize, n_rows: usize, n_cols: usize) -> SubImageSpec {
    SubImageSpec {
        row0: rng.random_range(0..=height - n_rows),
        col0: rng.random_range(0..=width - n_cols),
        n_rows,
        n_cols,
    }
}

/// A splice of a random donor region into a random place of the image.
pub fn random_splice(
    image: &ImageRgb,
    image_label: Option<usize>,
    donor: &Donor<'_>,
    cfg: &ForgeConfig,
    seed: u64,
) -> Result<ForgeryRecord> {
    let (h, w) = (image.height().min(donor.image.height()), image.width().min(donor.image.width()));
    cfg.validate(h, w)?;
    let mut rng = rng_for(seed, &[]);
    let rows = rng.random_range(cfg.min_side..=cfg.max_side.min(h));
    let cols = rng.random_range(cfg.min_side..=cfg.max_side.min(w));
    let dst = random_rect(&mut rng, image.height(), image.width(), rows, cols);
    let src = random_rect(&mut rng, donor.image.height(), donor.image.width(), rows, cols);
    splice_from_other(image, image_label, donor, src, dst)
}

/// A self copy with random placement, flip and stretch.
pub fn random_self_copy(image: &ImageRgb, cfg: &ForgeConfig, seed: u64) -> Result<ForgeryRecord> {
    let (h, w) = (image.height(), image.width());
    cfg.validate(h, w)?;
    let mut rng = rng_for(seed, &[]);
    let rows = rng.random_range(cfg.min_side..=cfg.max_side.min(h));
    let cols = rng.random_range(cfg.min_side..=cfg.max_side.min(w));
    let dst = random_rect(&mut rng, h, w, rows, cols);
    let sy = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let sx = rng.random_range(cfg.min_scale..=cfg.max_scale);
    let src_rows = ((rows as f64 / sy).round() as usize).clamp(1, h);
    let src_cols = ((cols as f64 / sx).round() as usize).clamp(1, w);
    let src = random_rect(&mut rng, h, w, src_rows, src_cols);
    let flip = rng.random_bool(cfg.hflip_probability.clamp(0.0, 1.0));
    self_copy_move(image, src, dst, Transform::fit(&src, &dst, flip))
}
