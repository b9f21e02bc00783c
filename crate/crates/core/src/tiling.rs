//! Decomposition of an image into sub-images, training patches and
//! sliding analysis windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::ImageRgb;
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Side length of the network input.
pub const PATCH_SIZE: usize = 64;

/// A rectangular region of a parent image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubImageSpec {
    pub row0: usize,
    pub col0: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl SubImageSpec {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.n_rows && col >= self.col0 && col < self.col0 + self.n_cols
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.row0 + self.n_rows <= height && self.col0 + self.n_cols <= width
    }
}

/// A 64x64 crop fed to the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub pixels: ImageRgb,
    /// Absolute (row, col) of the top-left corner in the parent image.
    pub origin: (usize, usize),
    pub parent: String,
}

impl Patch {
    pub fn new(pixels: ImageRgb, origin: (usize, usize), parent: impl Into<String>) -> Result<Self> {
        if pixels.height() != PATCH_SIZE || pixels.width() != PATCH_SIZE {
            return Err(Error::Shape(format!(
                "patch must be {PATCH_SIZE}x{PATCH_SIZE}x3, got {}x{}x3",
                pixels.height(),
                pixels.width()
            )));
        }
        Ok(Patch {
            pixels,
            origin,
            parent: parent.into(),
        })
    }

    /// Crops the patch whose top-left corner is `origin`.
    pub fn from_image(image: &ImageRgb, origin: (usize, usize), parent: impl Into<String>) -> Result<Self> {
        let pixels = image.crop(origin.0, origin.1, PATCH_SIZE, PATCH_SIZE)?;
        Patch::new(pixels, origin, parent)
    }
}

/// Non-overlapping `n` x `m` tiles in boustrophedon order: the first tile
/// row runs left to right, the next right to left, and so on. Right and
/// bottom remainders narrower than a tile are dropped.
pub fn split_zigzag(height: usize, width: usize, n: usize, m: usize) -> Result<Vec<SubImageSpec>> {
    if n < PATCH_SIZE || m < PATCH_SIZE {
        return Err(Error::Tiling(format!(
            "sub-image size {n}x{m} is below the {PATCH_SIZE}x{PATCH_SIZE} minimum"
        )));
    }
    if height < n || width < m {
        return Err(Error::Tiling(format!(
            "{height}x{width} image is smaller than one {n}x{m} sub-image"
        )));
    }
    let (tile_rows, tile_cols) = (height / n, width / m);
    let mut tiles = Vec::with_capacity(tile_rows * tile_cols);
    for tr in 0..tile_rows {
        let cols: Box<dyn Iterator<Item = usize>> = if tr % 2 == 0 {
            Box::new(0..tile_cols)
        } else {
            Box::new((0..tile_cols).rev())
        };
        for tc in cols {
            tiles.push(SubImageSpec {
                row0: tr * n,
                col0: tc * m,
                n_rows: n,
                n_cols: m,
            });
        }
    }
    Ok(tiles)
}

/// Top-left offset (relative to the sub-image) of a seeded, uniformly
/// placed patch.
pub fn random_patch_offset(sub: &SubImageSpec, rng_seed: u64) -> (usize, usize) {
    let mut rng = rng_for(rng_seed, &[]);
    let dr = rng.random_range(0..=sub.n_rows - PATCH_SIZE);
    let dc = rng.random_range(0..=sub.n_cols - PATCH_SIZE);
    (dr, dc)
}

/// A 64x64 patch from a uniformly random location inside `sub`.
pub fn extract_random_patch(sub: &SubImageSpec, image: &ImageRgb, rng_seed: u64) -> Result<Patch> {
    if sub.n_rows < PATCH_SIZE || sub.n_cols < PATCH_SIZE {
        return Err(Error::Tiling(format!(
            "sub-image {}x{} cannot hold a {PATCH_SIZE}x{PATCH_SIZE} patch",
            sub.n_rows, sub.n_cols
        )));
    }
    if !sub.fits_in(image.height(), image.width()) {
        return Err(Error::Tiling(format!(
            "sub-image {sub:?} lies outside the {}x{} image",
            image.height(),
            image.width()
        )));
    }
    let (dr, dc) = random_patch_offset(sub, rng_seed);
    Patch::from_image(image, (sub.row0 + dr, sub.col0 + dc), "")
}

/// Window origins along one axis: multiples of `stride`, plus one final
/// origin flush with the far edge when the stride does not land on it.
pub fn axis_origins(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    debug_assert!(stride >= 1 && dim >= size);
    let last = dim - size;
    let mut origins: Vec<usize> = (0..=last).step_by(stride).collect();
    if *origins.last().expect("origin 0 always present") != last {
        origins.push(last);
    }
    origins
}

/// Square `size` windows at `stride` spacing, row-major, covering every pixel.
pub fn sliding_windows(height: usize, width: usize, size: usize, stride: usize) -> Result<Vec<SubImageSpec>> {
    if stride < 1 {
        return Err(Error::Parameter("stride must be at least 1".into()));
    }
    if size == 0 || height < size || width < size {
        return Err(Error::Tiling(format!(
            "{height}x{width} image cannot hold a {size}x{size} window"
        )));
    }
    let rows = axis_origins(height, size, stride);
    let cols = axis_origins(width, size, stride);
    let mut windows = Vec::with_capacity(rows.len() * cols.len());
    for &row0 in &rows {
        for &col0 in &cols {
            windows.push(SubImageSpec {
                row0,
                col0,
                n_rows: size,
                n_cols: size,
            });
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn origins(tiles: &[SubImageSpec]) -> Vec<(usize, usize)> {
        tiles.iter().map(|t| (t.row0, t.col0)).collect()
    }

    #[test]
    fn zigzag_order_is_boustrophedon() {
        let tiles = split_zigzag(128, 192, 64, 64).unwrap();
        assert_eq!(
            origins(&tiles),
            vec![(0, 0), (0, 64), (0, 128), (64, 128), (64, 64), (64, 0)]
        );
    }

    #[test]
    fn zigzag_single_tile_and_remainder() {
        assert_eq!(origins(&split_zigzag(64, 64, 64, 64).unwrap()), vec![(0, 0)]);
        assert_eq!(origins(&split_zigzag(100, 100, 64, 64).unwrap()), vec![(0, 0)]);
        assert!(split_zigzag(63, 64, 64, 64).is_err());
        assert!(split_zigzag(128, 128, 32, 64).is_err());
    }

    #[test]
    fn random_patch_in_minimal_sub_image_is_fixed() {
        let img = ImageRgb::from_fn(128, 128, |r, c| [r as u8, c as u8, 0]);
        let sub = SubImageSpec {
            row0: 64,
            col0: 0,
            n_rows: 64,
            n_cols: 64,
        };
        for seed in 0..5 {
            assert_eq!(extract_random_patch(&sub, &img, seed).unwrap().origin, (64, 0));
        }
    }

    #[test]
    fn random_patch_is_seeded() {
        let img = ImageRgb::filled(128, 128, [9, 9, 9]);
        let sub = SubImageSpec {
            row0: 0,
            col0: 0,
            n_rows: 128,
            n_cols: 128,
        };
        let a = extract_random_patch(&sub, &img, 11).unwrap().origin;
        assert_eq!(a, extract_random_patch(&sub, &img, 11).unwrap().origin);
    }

    #[test]
    fn sliding_window_counts() {
        assert_eq!(sliding_windows(128, 128, 64, 64).unwrap().len(), 4);
        assert_eq!(sliding_windows(128, 128, 64, 32).unwrap().len(), 9);
        assert_eq!(axis_origins(100, 64, 32), vec![0, 32, 36]);
        assert_eq!(sliding_windows(100, 100, 64, 32).unwrap().len(), 9);
        assert!(sliding_windows(128, 128, 64, 0).is_err());
    }
}
