//! Sliding-window patch extraction and the saturation-based background filter.

use image::{GenericImageView, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_PATCH_SIZE: u32 = 512;
pub const DEFAULT_STRIDE: u32 = 224;
pub const DEFAULT_SATURATION_THRESHOLD: f64 = 0.05;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.25;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TessellateError {
    #[error("image {width}x{height} is smaller than patch size {patch_size}")]
    ImageTooSmall { width: u32, height: u32, patch_size: u32 },
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("patch size must be at least 1")]
    InvalidPatchSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub tile: RgbImage,
    pub x: u32,
    pub y: u32,
}

/// Row-major bag of equally sized tiles cut from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBag {
    pub patches: Vec<Patch>,
    pub patch_size: u32,
    pub stride: u32,
    pub source_dims: (u32, u32),
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn tiles(&self) -> Vec<&RgbImage> {
        self.patches.iter().map(|p| &p.tile).collect()
    }

    pub fn coords(&self) -> Vec<(u32, u32)> {
        self.patches.iter().map(|p| (p.x, p.y)).collect()
    }
}

/// Number of window positions along one axis: `⌊(len − patch) / stride⌋ + 1`.
pub fn positions_along(len: u32, patch_size: u32, stride: u32) -> u32 {
    if len < patch_size || stride == 0 {
        0
    } else {
        (len - patch_size) / stride + 1
    }
}

/// Cuts `patch_size`² tiles at `x, y ∈ {0, stride, 2·stride, …}` with the tile
/// fully inside the image; trailing margins are dropped.
pub fn tessellate(image: &RgbImage, patch_size: u32, stride: u32) -> Result<PatchBag, TessellateError> {
    if patch_size == 0 {
        return Err(TessellateError::InvalidPatchSize);
    }
    if stride == 0 {
        return Err(TessellateError::InvalidStride);
    }
    let (w, h) = image.dimensions();
    if w < patch_size || h < patch_size {
        return Err(TessellateError::ImageTooSmall {
            width: w,
            height: h,
            patch_size,
        });
    }
    let nx = positions_along(w, patch_size, stride);
    let ny = positions_along(h, patch_size, stride);
    let patches = (0..nx * ny)
        .into_par_iter()
        .map(|k| {
            let (x, y) = ((k % nx) * stride, (k / nx) * stride);
            Patch {
                tile: image.view(x, y, patch_size, patch_size).to_image(),
                x,
                y,
            }
        })
        .collect();
    Ok(PatchBag {
        patches,
        patch_size,
        stride,
        source_dims: (w, h),
    })
}

/// HSV saturation `(max − min) / max` of an 8-bit pixel, 0 for black.
pub fn saturation(p: [u8; 3]) -> f64 {
    let max = p.iter().copied().max().unwrap_or(0);
    let min = p.iter().copied().min().unwrap_or(0);
    if max == 0 {
        0.0
    } else {
        f64::from(max - min) / f64::from(max)
    }
}

/// Fraction of pixels whose saturation exceeds `saturation_threshold`.
pub fn tissue_fraction(tile: &RgbImage, saturation_threshold: f64) -> f64 {
    let n = tile.pixels().len();
    if n == 0 {
        return 0.0;
    }
    let hits = tile.pixels().filter(|p| saturation(p.0) > saturation_threshold).count();
    hits as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundFilter {
    pub saturation_threshold: f64,
    pub min_tissue_fraction: f64,
}

impl Default for BackgroundFilter {
    fn default() -> Self {
        Self {
            saturation_threshold: DEFAULT_SATURATION_THRESHOLD,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
        }
    }
}

/// Keeps tiles with tissue fraction ≥ `min_tissue_fraction`, in order. If none
/// qualifies, the single tile with the highest tissue fraction (first on ties)
/// is kept so the bag is never empty.
///
/// Thresholds outside `[0, 1]` are clamped.
pub fn filter_background(bag: &PatchBag, saturation_threshold: f64, min_tissue_fraction: f64) -> PatchBag {
    let sat = saturation_threshold.clamp(0.0, 1.0);
    let min_frac = min_tissue_fraction.clamp(0.0, 1.0);
    let fractions: Vec<f64> = bag.patches.par_iter().map(|p| tissue_fraction(&p.tile, sat)).collect();
    let mut kept: Vec<Patch> = bag
        .patches
        .iter()
        .zip(&fractions)
        .filter(|(_, &f)| f >= min_frac)
        .map(|(p, _)| p.clone())
        .collect();
    if kept.is_empty() && !bag.patches.is_empty() {
        let best = fractions
            .iter()
            .enumerate()
            .fold(0usize, |b, (i, &f)| if f > fractions[b] { i } else { b });
        kept.push(bag.patches[best].clone());
    }
    PatchBag {
        patches: kept,
        ..bag.clone_header()
    }
}

impl PatchBag {
    fn clone_header(&self) -> PatchBag {
        PatchBag {
            patches: Vec::new(),
            patch_size: self.patch_size,
            stride: self.stride,
            source_dims: self.source_dims,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn bag_of(tiles: Vec<RgbImage>) -> PatchBag {
        let n = tiles.len() as u32;
        PatchBag {
            patches: tiles
                .into_iter()
                .enumerate()
                .map(|(i, tile)| Patch {
                    tile,
                    x: i as u32 * 4,
                    y: 0,
                })
                .collect(),
            patch_size: 4,
            stride: 4,
            source_dims: (4 * n, 4),
        }
    }

    #[test]
    fn grid_counts() {
        let img = RgbImage::new(2048, 2048);
        assert_eq!(tessellate(&img, 512, 512).unwrap().len(), 16);
        let bag = tessellate(&img, 512, 224).unwrap();
        assert_eq!(bag.len(), 49);
        // explicit enumeration of admissible origins
        let xs: Vec<u32> = (0..2048).step_by(224).filter(|x| x + 512 <= 2048).collect();
        assert_eq!(xs, [0, 224, 448, 672, 896, 1120, 1344]);
        let expected: Vec<(u32, u32)> = xs.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
        assert_eq!(bag.coords(), expected);
    }

    #[test]
    fn single_tile_and_errors() {
        let img = RgbImage::new(512, 512);
        for stride in [1, 7, 224, 4096] {
            let bag = tessellate(&img, 512, stride).unwrap();
            assert_eq!(bag.coords(), [(0, 0)]);
        }
        assert_eq!(tessellate(&img, 512, 0), Err(TessellateError::InvalidStride));
        assert!(matches!(
            tessellate(&RgbImage::new(511, 600), 512, 224),
            Err(TessellateError::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn tiles_carry_source_pixels() {
        let mut img = RgbImage::new(6, 6);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgb([x as u8, y as u8, 0]);
        }
        let bag = tessellate(&img, 3, 3).unwrap();
        assert_eq!(bag.patches[3].tile.get_pixel(1, 2).0, [4, 5, 0]);
        assert!(bag.patches.iter().all(|p| p.tile.dimensions() == (3, 3)));
    }

    #[test]
    fn background_fallback_and_selection() {
        let white = RgbImage::from_pixel(4, 4, Rgb([255, 255, 255]));
        let pink = RgbImage::from_pixel(4, 4, Rgb([230, 120, 180]));
        let all_white = bag_of(vec![white.clone(), white.clone(), white.clone()]);
        let f = filter_background(&all_white, 0.05, 0.25);
        assert_eq!(f.len(), 1);
        assert_eq!(f.patches[0].x, 0);

        let mixed = bag_of(vec![white.clone(), pink.clone(), white.clone()]);
        // pink saturation = (230-120)/230 ≈ 0.478 > 0.1 at every pixel; white = 0
        assert_eq!(tissue_fraction(&pink, 0.1), 1.0);
        assert_eq!(tissue_fraction(&white, 0.1), 0.0);
        let f = filter_background(&mixed, 0.1, 0.5);
        assert_eq!(f.coords(), [(4, 0)]);

        let f = filter_background(&mixed, 0.0, 0.0);
        assert_eq!(f, mixed);
    }

    proptest! {
        #[test]
        fn count_matches_closed_form(w in 1u32..300, h in 1u32..300, p in 1u32..64, s in 1u32..80) {
            let img = RgbImage::new(w, h);
            match tessellate(&img, p, s) {
                Ok(bag) => {
                    prop_assert_eq!(bag.len() as u32, ((w - p) / s + 1) * ((h - p) / s + 1));
                    for patch in &bag.patches {
                        prop_assert_eq!(patch.x % s, 0);
                        prop_assert_eq!(patch.y % s, 0);
                        prop_assert!(patch.x + p <= w && patch.y + p <= h);
                    }
                    let c = bag.coords();
                    let mut sorted = c.clone();
                    sorted.sort_by_key(|&(x, y)| (y, x));
                    prop_assert_eq!(c, sorted);
                }
                Err(_) => prop_assert!(w < p || h < p),
            }
        }

        #[test]
        fn filter_is_idempotent(pixels in proptest::collection::vec(any::<[u8; 3]>(), 4..40), sat in 0.0f64..1.0, frac in 0.0f64..1.0) {
            let tiles: Vec<RgbImage> = pixels
                .chunks(4)
                .map(|ch| {
                    let mut t = RgbImage::new(2, 2);
                    for (i, p) in t.pixels_mut().enumerate() {
                        *p = Rgb(ch[i % ch.len()]);
                    }
                    t
                })
                .collect();
            let bag = bag_of(tiles);
            let once = filter_background(&bag, sat, frac);
            prop_assert!(!once.is_empty());
            prop_assert_eq!(filter_background(&once, sat, frac), once);
        }
    }
}
