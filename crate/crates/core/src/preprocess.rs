//! Slice selection, ROI cropping and model-input conversion.

use serde::{Deserialize, Serialize};

use crate::dataset::{CtVolume, SliceImage};
use crate::error::{Error, Result};

pub const MODEL_INPUT_SIZE: usize = 224;
pub const MODEL_INPUT_CHANNELS: usize = 3;
pub const SOURCE_DIM: usize = 512;
pub const DEFAULT_CROP_HEIGHT: usize = 227;
pub const DEFAULT_CROP_WIDTH: usize = 300;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    keep_fraction: f64,
}

impl SelectionPolicy {
    pub fn new(keep_fraction: f64) -> Result<Self> {
        if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
            return Err(Error::invalid(
                "keep_fraction",
                format!("must lie in (0, 1], got {keep_fraction}"),
            ));
        }
        Ok(Self { keep_fraction })
    }

    pub fn keep_fraction(&self) -> f64 {
        self.keep_fraction
    }

    /// Number of slices dropped from each end of an `n`-slice volume.
    pub fn removed_per_end(&self, n: usize) -> usize {
        let per_end = (1.0 - self.keep_fraction) / 2.0 * n as f64;
        // products such as 0.2 * n can land an ulp below the integer
        (per_end + 1e-9).floor() as usize
    }

    /// Half-open index range of the slices kept out of `n`.
    pub fn kept_range(&self, n: usize) -> std::ops::Range<usize> {
        if n == 0 {
            return 0..0;
        }
        let r = self.removed_per_end(n);
        if n < 2 * r + 1 {
            let mid = n / 2;
            return mid..mid + 1;
        }
        r..n - r
    }
}

impl Default for SelectionPolicy {
    fn default() -> Self {
        Self {
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }
}

/// Keeps the central run of slices, dropping an equal count from the top and
/// bottom of the stack.
pub fn select_central_slices(volume: &CtVolume, policy: &SelectionPolicy) -> CtVolume {
    let range = policy.kept_range(volume.len());
    CtVolume {
        patient_id: volume.patient_id.clone(),
        slices: volume.slices[range].to_vec(),
        label: volume.label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

impl CropWindow {
    /// Window of the given size centered on a `height`x`width` slice, shrunk to
    /// the slice when it does not fit. Odd margins round toward the top-left.
    pub fn centered(height: usize, width: usize, crop_height: usize, crop_width: usize) -> Self {
        let crop_height = crop_height.min(height);
        let crop_width = crop_width.min(width);
        Self {
            top: (height - crop_height) / 2,
            left: (width - crop_width) / 2,
            crop_height,
            crop_width,
        }
    }

    pub fn full(slice: &SliceImage) -> Self {
        Self {
            top: 0,
            left: 0,
            crop_height: slice.height(),
            crop_width: slice.width(),
        }
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.crop_height >= 1
            && self.crop_width >= 1
            && self.top.checked_add(self.crop_height).is_some_and(|b| b <= height)
            && self.left.checked_add(self.crop_width).is_some_and(|r| r <= width)
    }
}

impl Default for CropWindow {
    fn default() -> Self {
        Self::centered(
            SOURCE_DIM,
            SOURCE_DIM,
            DEFAULT_CROP_HEIGHT,
            DEFAULT_CROP_WIDTH,
        )
    }
}

/// How a crop window is chosen for each slice.
///
/// Without an explicit offset the window is centered on the actual slice
/// dimensions; with one, the window is used verbatim and must fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub crop_height: usize,
    pub crop_width: usize,
    pub offset: Option<(usize, usize)>,
    /// Reject slices that are not 512x512.
    pub strict_dims: bool,
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            crop_height: DEFAULT_CROP_HEIGHT,
            crop_width: DEFAULT_CROP_WIDTH,
            offset: None,
            strict_dims: false,
        }
    }
}

impl CropSpec {
    pub fn window_for(&self, height: usize, width: usize) -> Result<CropWindow> {
        if self.crop_height == 0 || self.crop_width == 0 {
            return Err(Error::invalid("crop", "crop dimensions must be positive"));
        }
        if self.strict_dims && (height != SOURCE_DIM || width != SOURCE_DIM) {
            return Err(Error::UnexpectedDims { height, width });
        }
        match self.offset {
            Some((top, left)) => Ok(CropWindow {
                top,
                left,
                crop_height: self.crop_height,
                crop_width: self.crop_width,
            }),
            None => Ok(CropWindow::centered(
                height,
                width,
                self.crop_height,
                self.crop_width,
            )),
        }
    }
}

/// Copies the window out of the slice without any resampling.
pub fn crop_slice(slice: &SliceImage, window: &CropWindow) -> Result<SliceImage> {
    if !window.fits(slice.height(), slice.width()) {
        return Err(Error::CropOutOfBounds {
            height: slice.height(),
            width: slice.width(),
            top: window.top,
            left: window.left,
            window_height: window.crop_height,
            window_width: window.crop_width,
        });
    }
    let mut pixels = Vec::with_capacity(window.crop_height * window.crop_width);
    for row in window.top..window.top + window.crop_height {
        pixels.extend_from_slice(&slice.row(row)[window.left..window.left + window.crop_width]);
    }
    SliceImage::new(window.crop_height, window.crop_width, pixels)
}

/// A 224x224x3 model input. The three channels are replicas of one plane, so
/// only that plane is stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInputTensor {
    plane: Vec<f32>,
}

impl ModelInputTensor {
    pub const HEIGHT: usize = MODEL_INPUT_SIZE;
    pub const WIDTH: usize = MODEL_INPUT_SIZE;
    pub const CHANNELS: usize = MODEL_INPUT_CHANNELS;
    pub const PLANE_LEN: usize = MODEL_INPUT_SIZE * MODEL_INPUT_SIZE;
    pub const LEN: usize = Self::PLANE_LEN * MODEL_INPUT_CHANNELS;

    pub fn from_plane(plane: Vec<f32>) -> Result<Self> {
        if plane.len() != Self::PLANE_LEN {
            return Err(Error::InvalidSlice(format!(
                "model input plane needs {} values, got {}",
                Self::PLANE_LEN,
                plane.len()
            )));
        }
        if let Some(bad) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidSlice(format!(
                "model input value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { plane })
    }

    pub fn filled(value: f32) -> Result<Self> {
        Self::from_plane(vec![value; Self::PLANE_LEN])
    }

    pub fn plane(&self) -> &[f32] {
        &self.plane
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize, channel: usize) -> f32 {
        assert!(channel < Self::CHANNELS, "channel {channel} out of range");
        self.plane[row * Self::WIDTH + col]
    }

    /// Values in row-major, channel-last order.
    pub fn channel_last(&self) -> impl Iterator<Item = f32> + '_ {
        self.plane
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, Self::CHANNELS))
    }

    pub fn mean(&self) -> f64 {
        self.plane.iter().map(|&v| v as f64).sum::<f64>() / Self::PLANE_LEN as f64
    }
}

/// Source coordinate sampled by output index `dst` under half-pixel-centre
/// alignment, split into the lower neighbour and interpolation weight.
fn sample_axis(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f32) {
    let scale = src_len as f64 / dst_len as f64;
    let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = x.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, (x - lo as f64) as f32)
}

/// Bilinear resize of an 8-bit slice to `out_h`x`out_w`, returning raw
/// intensities (0..=255) as f32.
pub fn resize_bilinear(slice: &SliceImage, out_h: usize, out_w: usize) -> Vec<f32> {
    let cols: Vec<_> = (0..out_w)
        .map(|j| sample_axis(j, slice.width(), out_w))
        .collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (r0, r1, fy) = sample_axis(i, slice.height(), out_h);
        let (row0, row1) = (slice.row(r0), slice.row(r1));
        for &(c0, c1, fx) in &cols {
            let (a, b) = (row0[c0] as f32, row0[c1] as f32);
            let (c, d) = (row1[c0] as f32, row1[c1] as f32);
            let top = a + (b - a) * fx;
            let bottom = c + (d - c) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

pub fn to_model_input(slice: &SliceImage) -> Result<ModelInputTensor> {
    if slice.height() < 2 || slice.width() < 2 {
        return Err(Error::DegenerateSlice {
            height: slice.height(),
            width: slice.width(),
        });
    }
    let plane = resize_bilinear(slice, MODEL_INPUT_SIZE, MODEL_INPUT_SIZE)
        .into_iter()
        .map(|v| (v / 255.0).clamp(0.0, 1.0))
        .collect();
    Ok(ModelInputTensor { plane })
}

/// Select, crop and convert a whole volume. Output order follows the kept
/// slice order.
pub fn preprocess_volume(
    volume: &CtVolume,
    policy: &SelectionPolicy,
    crop: &CropSpec,
) -> Result<Vec<ModelInputTensor>> {
    let range = policy.kept_range(volume.len());
    volume.slices[range]
        .iter()
        .map(|slice| {
            let window = crop.window_for(slice.height(), slice.width())?;
            to_model_input(&crop_slice(slice, &window)?)
        })
        .collect()
}
