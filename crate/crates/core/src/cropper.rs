//! Unscaled cropping: random training crops with flips and color jitter, and
//! a deterministic grid of evaluation crops whose predictions are averaged or
//! flattened for a meta-learner.
//!
//! Evaluation crops form a `sqrt(R) x sqrt(R)` grid. Row offsets are
//! `round(linspace(0, H - crop, sqrt(R)))` and column offsets likewise; crop
//! `i` sits at grid row `i / sqrt(R)` and grid column `i % sqrt(R)`. Crops are
//! plain sub-windows: no interpolation and no rescaling.

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::csvio;
use crate::ingest::IngestError;

#[derive(Debug, Error, PartialEq)]
pub enum CropError {
    #[error("crop of {crop} px does not fit a {height}x{width} image")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },
    #[error("crop count {0} is not a positive perfect square")]
    NonSquareR(usize),
    #[error("no predictions to aggregate")]
    EmptyInput,
    #[error("image must have 3 channels, found {0}")]
    ChannelCount(usize),
    #[error("saturation range ({0}, {1}) is invalid")]
    InvalidSaturation(f64, f64),
    #[error("brightness delta {0} must be non-negative")]
    InvalidBrightness(f64),
}

/// `H x W x 3` image with values in `[0, 1]`, plus the training-set channel
/// means subtracted by [`augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageArray {
    pub pixels: Array3<f64>,
    pub channel_means: [f64; 3],
}

impl ImageArray {
    pub fn new(pixels: Array3<f64>, channel_means: [f64; 3]) -> Result<Self, CropError> {
        if pixels.dim().2 != 3 {
            return Err(CropError::ChannelCount(pixels.dim().2));
        }
        Ok(Self {
            pixels,
            channel_means,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropGrid {
    pub crop: usize,
    /// `(row, col)` of each crop's top-left corner.
    pub offsets: Vec<(usize, usize)>,
}

impl CropGrid {
    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn write<W: Write>(&self, output: W) -> Result<(), IngestError> {
        let mut wtr = csvio::writer(output);
        csvio::write_row(&mut wtr, ["crop_index", "row", "col"])?;
        for (i, (r, c)) in self.offsets.iter().enumerate() {
            csvio::write_row(&mut wtr, [i.to_string(), r.to_string(), c.to_string()])?;
        }
        csvio::finish(wtr)
    }

    pub fn save(&self, path: &Path) -> Result<(), IngestError> {
        csvio::write_atomic(path, |w| self.write(w))
    }
}

/// `n` evenly spaced points from 0 to `span`, rounded half away from zero.
fn rounded_linspace(span: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![0];
    }
    let step = span as f64 / (n - 1) as f64;
    (0..n).map(|i| (i as f64 * step).round() as usize).collect()
}

/// Evaluation crop positions for an `height x width` image.
///
/// ```
/// use imbalkit::cropper::crop_grid;
/// let grid = crop_grid(450, 600, 224, 36).unwrap();
/// let rows: Vec<usize> = grid.offsets.iter().step_by(6).map(|o| o.0).collect();
/// assert_eq!(rows, [0, 45, 90, 136, 181, 226]);
/// ```
pub fn crop_grid(height: usize, width: usize, crop: usize, count: usize) -> Result<CropGrid, CropError> {
    if crop == 0 || crop > height.min(width) {
        return Err(CropError::CropTooLarge {
            crop,
            height,
            width,
        });
    }
    let side = (count as f64).sqrt().round() as usize;
    if count == 0 || side * side != count {
        return Err(CropError::NonSquareR(count));
    }
    let rows = rounded_linspace(height - crop, side);
    let cols = rounded_linspace(width - crop, side);
    let offsets = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(CropGrid { crop, offsets })
}

pub fn extract_crops(img: &ImageArray, grid: &CropGrid) -> Result<Vec<Array3<f64>>, CropError> {
    let (h, w) = (img.height(), img.width());
    grid.offsets
        .iter()
        .map(|&(r, c)| {
            if r + grid.crop > h || c + grid.crop > w {
                return Err(CropError::CropTooLarge {
                    crop: grid.crop,
                    height: h,
                    width: w,
                });
            }
            Ok(img
                .pixels
                .slice(s![r..r + grid.crop, c..c + grid.crop, ..])
                .to_owned())
        })
        .collect()
}

/// Jitter magnitudes for [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub brightness_delta: f64,
    pub saturation_range: (f64, f64),
    pub flip_probability: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            brightness_delta: 0.1,
            saturation_range: (0.8, 1.2),
            flip_probability: 0.5,
        }
    }
}

/// One realization of the random choices made by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub row: usize,
    pub col: usize,
    pub flip_vertical: bool,
    pub flip_horizontal: bool,
    pub brightness: f64,
    pub saturation: f64,
}

impl AugmentDraw {
    /// Full-image crop with no flips or jitter.
    pub fn identity() -> Self {
        Self {
            row: 0,
            col: 0,
            flip_vertical: false,
            flip_horizontal: false,
            brightness: 0.0,
            saturation: 1.0,
        }
    }

    /// Draws in a fixed order: row, col, vertical flip, horizontal flip,
    /// brightness, saturation.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        height: usize,
        width: usize,
        crop: usize,
        params: &AugmentParams,
    ) -> Result<Self, CropError> {
        if crop == 0 || crop > height.min(width) {
            return Err(CropError::CropTooLarge {
                crop,
                height,
                width,
            });
        }
        let (lo, hi) = params.saturation_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CropError::InvalidSaturation(lo, hi));
        }
        let delta = params.brightness_delta;
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(CropError::InvalidBrightness(delta));
        }
        Ok(Self {
            row: rng.gen_range(0..=height - crop),
            col: rng.gen_range(0..=width - crop),
            flip_vertical: rng.gen_bool(params.flip_probability),
            flip_horizontal: rng.gen_bool(params.flip_probability),
            brightness: rng.gen_range(-delta..=delta),
            saturation: rng.gen_range(lo..=hi),
        })
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Applies a drawn augmentation: crop, flips, brightness shift, saturation
/// scaling toward per-pixel luma, then channel-mean subtraction. Pixel values
/// are clamped to `[0, 1]` after each color step.
pub fn apply_augment(img: &ImageArray, crop: usize, draw: &AugmentDraw) -> Result<Array3<f64>, CropError> {
    if crop == 0 || draw.row + crop > img.height() || draw.col + crop > img.width() {
        return Err(CropError::CropTooLarge {
            crop,
            height: img.height(),
            width: img.width(),
        });
    }
    let mut window = img
        .pixels
        .slice(s![draw.row..draw.row + crop, draw.col..draw.col + crop, ..]);
    if draw.flip_vertical {
        window.invert_axis(Axis(0));
    }
    if draw.flip_horizontal {
        window.invert_axis(Axis(1));
    }
    let mut out = window.to_owned();
    for mut px in out.lanes_mut(Axis(2)) {
        for v in px.iter_mut() {
            *v = (*v + draw.brightness).clamp(0.0, 1.0);
        }
        if draw.saturation != 1.0 {
            let gray: f64 = px.iter().zip(LUMA).map(|(v, w)| v * w).sum();
            for v in px.iter_mut() {
                *v = (gray + draw.saturation * (*v - gray)).clamp(0.0, 1.0);
            }
        }
        for (v, mean) in px.iter_mut().zip(img.channel_means) {
            *v -= mean;
        }
    }
    Ok(out)
}

/// Random training crop of side `crop` with flips and color jitter.
pub fn augment<R: Rng + ?Sized>(
    img: &ImageArray,
    crop: usize,
    rng: &mut R,
    params: &AugmentParams,
) -> Result<Array3<f64>, CropError> {
    let draw = AugmentDraw::sample(rng, img.height(), img.width(), crop, params)?;
    apply_augment(img, crop, &draw)
}

/// Mean over crops of an `R x C` prediction matrix.
pub fn aggregate_mean(preds: ArrayView2<'_, f64>) -> Result<Array1<f64>, CropError> {
    preds.mean_axis(Axis(0)).ok_or(CropError::EmptyInput)
}

/// Concatenates the rows of an `R x C` matrix: crop 0's classes first.
pub fn flatten_crops(preds: ArrayView2<'_, f64>) -> Array1<f64> {
    preds.iter().copied().collect()
}

/// Inverse of [`flatten_crops`].
pub fn unflatten_crops(flat: &Array1<f64>, classes: usize) -> Option<Array2<f64>> {
    if classes == 0 || flat.len() % classes != 0 {
        return None;
    }
    Array2::from_shape_vec((flat.len() / classes, classes), flat.to_vec()).ok()
}
