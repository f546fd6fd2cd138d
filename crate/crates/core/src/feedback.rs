//! The two feedback loops: crop-strategy switching with a temporally
//! smoothed regression box, and the state-weighted moving average of the
//! global target feature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{crop_and_resize, Box, CropTransform};
use crate::grid::{Grid, Image};
use crate::maskops::{BinaryMask, StateEstimate};
use crate::tensor::Tensor;

pub const DEFAULT_SMOOTHING: f64 = 0.3;
pub const DEFAULT_GLOBAL_STEP: f64 = 0.5;

/// Which box drives the next search region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Mask,
    Regression,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Mask => "mask",
            Strategy::Regression => "regression",
        }
    }
}

/// Running regression box with its smoothing weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedBoxState {
    pub bbox: Box,
    /// Update weight of the newest observation, in `[0, 1]`.
    pub smoothing: f64,
}

impl SmoothedBoxState {
    pub fn new(bbox: Box, smoothing: f64) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&smoothing) {
            return Err(Error::InvalidParameter {
                name: "smoothing",
                reason: format!("{smoothing} outside [0, 1]"),
            });
        }
        Ok(Self { bbox, smoothing })
    }

    /// Blends `reg_box` into the running box: linear on the centre, and in
    /// the log domain on scale `sqrt(w h)` and aspect ratio `w / h`.
    /// A degenerate observation leaves the state unchanged.
    pub fn smooth(&mut self, reg_box: &Box) -> Box {
        if !reg_box.is_valid() {
            return self.bbox;
        }
        let l = self.smoothing;
        let prev = self.bbox;
        let blend = |a: f64, b: f64| a + l * (b - a);
        let cx = blend(prev.cx, reg_box.cx);
        let cy = blend(prev.cy, reg_box.cy);
        let log_s = blend(0.5 * (prev.w * prev.h).ln(), 0.5 * (reg_box.w * reg_box.h).ln());
        let log_r = blend((prev.w / prev.h).ln(), (reg_box.w / reg_box.h).ln());
        let (s, sqrt_r) = (log_s.exp(), (0.5 * log_r).exp());
        let next = Box {
            cx,
            cy,
            w: s * sqrt_r,
            h: s / sqrt_r,
        };
        if next.is_valid() {
            self.bbox = next;
        }
        self.bbox
    }
}

/// Free-function form of [`SmoothedBoxState::smooth`].
pub fn smooth_box(sm: &mut SmoothedBoxState, reg_box: &Box) -> Box {
    sm.smooth(reg_box)
}

/// Picks the box for the next frame. The regression box is always folded
/// into the smoothed state so the fallback stays warm.
pub fn select_box(
    state: &StateEstimate,
    mask_box: Option<&Box>,
    reg_box: &Box,
    sm: &mut SmoothedBoxState,
) -> (Box, Strategy) {
    let smoothed = sm.smooth(reg_box);
    match mask_box {
        Some(mb) if state.is_normal => (*mb, Strategy::Mask),
        _ => (smoothed, Strategy::Regression),
    }
}

/// Outcome of a global-feature update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalUpdate {
    Applied,
    /// The observed feature was not finite; the state was left untouched.
    SkippedNonFinite,
}

/// Exponential moving average of background-filtered target features,
/// weighted per frame by the state score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFeature {
    pub values: Tensor,
    pub step: f64,
    pub initialized: bool,
    pub skipped_updates: usize,
}

impl GlobalFeature {
    pub fn uninitialized(c: usize, h: usize, w: usize, step: f64) -> Self {
        Self {
            values: Tensor::zeros(c, h, w),
            step,
            initialized: false,
            skipped_updates: 0,
        }
    }

    /// `G_0` taken directly from the first-frame feature.
    pub fn from_initial(values: Tensor, step: f64) -> Result<Self> {
        if !(step > 0.0 && step <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "mu",
                reason: format!("{step} outside (0, 1]"),
            });
        }
        if !values.is_finite() {
            return Err(Error::InvalidParameter {
                name: "global_feature",
                reason: "initial feature is not finite".into(),
            });
        }
        Ok(Self {
            values,
            step,
            initialized: true,
            skipped_updates: 0,
        })
    }

    /// `G_t = (1 - S mu) G_{t-1} + S mu F_t`.
    pub fn update(&mut self, f: &Tensor, s_state: f64) -> Result<GlobalUpdate> {
        if !self.initialized {
            return Err(Error::InvalidParameter {
                name: "global_feature",
                reason: "update before initialisation".into(),
            });
        }
        f.ensure_shape(self.values.shape())?;
        if !f.is_finite() {
            self.skipped_updates += 1;
            log::warn!("non-finite global feature observation skipped");
            return Ok(GlobalUpdate::SkippedNonFinite);
        }
        let a = s_state.clamp(0.0, 1.0) * self.step;
        if a == 0.0 {
            return Ok(GlobalUpdate::Applied);
        }
        for (g, &x) in self.values.data.iter_mut().zip(&f.data) {
            *g = (1.0 - a) * *g + a * x;
        }
        Ok(GlobalUpdate::Applied)
    }
}

pub fn update_global(g: &mut GlobalFeature, f: &Tensor, s_state: f64) -> Result<GlobalUpdate> {
    g.update(f, s_state)
}

/// Multiplies `crop` by `mask` (broadcast over channels) and resamples the
/// result to `out_size²`.
pub fn background_filtered(crop: &Image, mask: &Grid<f64>, out_size: usize) -> Result<Image> {
    let filtered = crop.masked(mask)?;
    if (crop.width(), crop.height()) == (out_size, out_size) {
        return Ok(filtered);
    }
    let t = CropTransform::identity(crop.width(), crop.height())?.with_output_size(out_size);
    crop_and_resize(&filtered, &t, &vec![0.0; crop.channels()])
}

/// `G_0 = extractor(crop ⊙ mask)` at the global-branch resolution.
pub fn init_global(
    first_frame_crop: &Image,
    init_mask: &BinaryMask,
    global_size: usize,
    step: f64,
    extractor: impl FnOnce(&Image) -> Tensor,
) -> Result<GlobalFeature> {
    if init_mask.is_empty_mask() {
        return Err(Error::EmptyMask("initial mask provides no supervision"));
    }
    let weights = init_mask.map(|&b| if b { 1.0 } else { 0.0 });
    let filtered = background_filtered(first_frame_crop, &weights, global_size)?;
    GlobalFeature::from_initial(extractor(&filtered), step)
}
