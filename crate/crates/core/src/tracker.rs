//! Per-tracklet Segmentation, Estimation, Feedback loop and multi-object
//! aggregation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{
    select_box, update_global, GlobalFeature, SmoothedBoxState, Strategy, DEFAULT_GLOBAL_STEP,
    DEFAULT_SMOOTHING,
};
use crate::geometry::{
    crop_and_resize, crop_grid, crop_with_mean_fill, make_search_region, paste_back, search_region_side,
    Box, CropTransform,
};
use crate::grid::{Grid, Image};
use crate::maskops::{
    binarize, estimate_state, largest_component_box, BinaryMask, ProbabilityMap, StateEstimate,
    DEFAULT_BINARIZE_THRESHOLD, DEFAULT_STATE_THRESHOLD,
};
use crate::segnet::{GlobalInput, SegInputs, SegNet, Template, TemplateInput};
use crate::tensor::Tensor;

/// Which box drives the next frame's crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxStrategy {
    /// Mask-box in normal states, smoothed regression-box otherwise.
    Switching,
    /// Mask-box only; the previous box is kept when the mask is empty.
    MaskOnly,
    RegressionOnly,
}

/// Where boxes or global-loop filter masks come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Predicted,
    /// Upper-bound runs on annotated data.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub state_threshold: f64,
    pub mu: f64,
    pub smoothing_lambda: f64,
    pub binarize_threshold: f64,
    pub saliency_context: f64,
    pub similarity_context: f64,
    pub strategy: BoxStrategy,
    pub global_loop: bool,
    pub box_source: Source,
    pub global_filter: Source,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            state_threshold: DEFAULT_STATE_THRESHOLD,
            mu: DEFAULT_GLOBAL_STEP,
            smoothing_lambda: DEFAULT_SMOOTHING,
            binarize_threshold: DEFAULT_BINARIZE_THRESHOLD,
            saliency_context: 1.0,
            similarity_context: 2.0,
            strategy: BoxStrategy::Switching,
            global_loop: true,
            box_source: Source::Predicted,
            global_filter: Source::Predicted,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    reason: format!("{v} outside [0, 1]"),
                })
            }
        };
        unit("state_threshold", self.state_threshold)?;
        unit("smoothing_lambda", self.smoothing_lambda)?;
        unit("binarize_threshold", self.binarize_threshold)?;
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(Error::InvalidParameter {
                name: "mu",
                reason: format!("{} outside (0, 1]", self.mu),
            });
        }
        for (name, v) in [("saliency_context", self.saliency_context), ("similarity_context", self.similarity_context)] {
            if !(v >= 1.0 && v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("{v} must be at least 1"),
                });
            }
        }
        Ok(())
    }
}

/// Output resolutions a segmenter expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSizes {
    pub saliency: usize,
    pub similarity: usize,
    pub template: usize,
    /// Side of the probability map over the saliency region.
    pub map: usize,
}

pub struct SegmentRequest<'a, T> {
    pub object: u8,
    pub frame_index: usize,
    pub prior: Box,
    pub saliency: CropTransform,
    pub similarity: CropTransform,
    pub template: &'a T,
    pub global: Option<&'a Tensor>,
}

/// Segmenter output for one tracklet and frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// `map × map` probabilities over the saliency region.
    pub prob: ProbabilityMap,
    /// Regression box in frame coordinates.
    pub reg_box: Box,
}

/// Anything that can play the role of the joint segmentation network.
pub trait Segmenter: Sync {
    type Template: Clone + Send + Sync;

    fn crop_sizes(&self) -> CropSizes;

    /// Embeds the target region cropped from the first frame.
    fn embed(&self, frame: &Image, object: u8, region: &CropTransform) -> Result<Self::Template>;

    /// Feature of `frame` inside `region`, weighted by `weights` (a grid over
    /// the same region at any resolution).
    fn global_feature(&self, frame: &Image, object: u8, region: &CropTransform, weights: &Grid<f64>) -> Result<Tensor>;

    fn segment(&self, frame: &Image, req: &SegmentRequest<'_, Self::Template>) -> Result<Segmentation>;
}

/// Template crop: same centre and pixel scale as the similarity crop.
pub fn template_region(b: &Box, similarity_context: f64, sizes: &CropSizes) -> Result<CropTransform> {
    let side = search_region_side(b, similarity_context) * sizes.template as f64 / sizes.similarity as f64;
    CropTransform::new(Box::new(b.cx, b.cy, side, side)?, sizes.template, sizes.template)
}

/// Per-object tracking state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletState<T> {
    pub id: u8,
    pub bbox: Box,
    pub smoothed: SmoothedBoxState,
    pub global: GlobalFeature,
    pub template: T,
    pub last_estimate: StateEstimate,
    pub frame_index: usize,
}

/// One row of per-frame, per-object telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub frame: usize,
    pub object: u8,
    pub s_cf: f64,
    pub s_cc: f64,
    pub s_state: f64,
    pub strategy: Strategy,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Ground truth for upper-bound runs.
#[derive(Debug, Clone, Copy)]
pub struct Hint<'a> {
    pub mask: &'a BinaryMask,
}

pub struct Tracker<'s, S> {
    pub segmenter: &'s S,
    pub config: TrackerConfig,
}

fn weights_of(m: &BinaryMask) -> Grid<f64> {
    m.map(|&b| if b { 1.0 } else { 0.0 })
}

/// Keeps boxes finite, at least 4 px and centred inside the frame.
fn keep_in_frame(b: Box, width: usize, height: usize) -> Box {
    let (fw, fh) = (width as f64, height as f64);
    Box {
        cx: b.cx.clamp(-0.5, fw - 0.5),
        cy: b.cy.clamp(-0.5, fh - 0.5),
        w: b.w.clamp(4.0, 2.0 * fw.max(fh)),
        h: b.h.clamp(4.0, 2.0 * fw.max(fh)),
    }
}

impl<'s, S: Segmenter> Tracker<'s, S> {
    pub fn new(segmenter: &'s S, config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { segmenter, config })
    }

    pub fn init_tracklet(&self, frame: &Image, init_mask: &BinaryMask, id: u8) -> Result<TrackletState<S::Template>> {
        if init_mask.shape() != (frame.width(), frame.height()) {
            return Err(Error::shape((frame.width(), frame.height()), init_mask.shape()));
        }
        let bbox = init_mask
            .bounding_box()
            .ok_or(Error::EmptyMask("initial mask provides no supervision"))?;
        let c = &self.config;
        let sizes = self.segmenter.crop_sizes();
        let template = self
            .segmenter
            .embed(frame, id, &template_region(&bbox, c.similarity_context, &sizes)?)?;
        let region = make_search_region(&bbox, c.saliency_context, sizes.map)?;
        let weights = crop_grid(&weights_of(init_mask), &region, 0.0);
        let g0 = self.segmenter.global_feature(frame, id, &region, &weights)?;
        Ok(TrackletState {
            id,
            bbox,
            smoothed: SmoothedBoxState::new(bbox, c.smoothing_lambda)?,
            global: GlobalFeature::from_initial(g0, c.mu)?,
            template,
            last_estimate: StateEstimate::perfect(),
            frame_index: 0,
        })
    }

    pub fn step(&self, ts: &mut TrackletState<S::Template>, frame: &Image) -> Result<(ProbabilityMap, Telemetry)> {
        self.step_with_hint(ts, frame, None)
    }

    /// [`Tracker::step`] with optional ground truth for the current frame,
    /// used when the config asks for ground-truth boxes or filtering.
    pub fn step_with_hint(
        &self,
        ts: &mut TrackletState<S::Template>,
        frame: &Image,
        hint: Option<Hint<'_>>,
    ) -> Result<(ProbabilityMap, Telemetry)> {
        let c = &self.config;
        let sizes = self.segmenter.crop_sizes();
        let (fw, fh) = (frame.width(), frame.height());
        let t = ts.frame_index + 1;
        if c.box_source == Source::GroundTruth {
            if let Some(b) = hint.and_then(|h| h.mask.bounding_box()) {
                ts.bbox = b;
            }
        }

        // segmentation
        let saliency = make_search_region(&ts.bbox, c.saliency_context, sizes.saliency)?;
        let similarity = make_search_region(&ts.bbox, c.similarity_context, sizes.similarity)?;
        let seg = self.segmenter.segment(
            frame,
            &SegmentRequest {
                object: ts.id,
                frame_index: t,
                prior: ts.bbox,
                saliency,
                similarity,
                template: &ts.template,
                global: c.global_loop.then_some(&ts.global.values),
            },
        )?;
        let map_t = saliency.with_output_size(sizes.map);
        if seg.prob.shape() != (sizes.map, sizes.map) {
            return Err(Error::shape((sizes.map, sizes.map), seg.prob.shape()));
        }

        // estimation
        let mask = binarize(&seg.prob, c.binarize_threshold);
        let est = estimate_state(&seg.prob, &mask, c.state_threshold)?;
        let mask_box = largest_component_box(&mask).ok().map(|b| map_t.box_to_frame(&b));

        // feedback: cropping strategy
        let (next, strategy) = match c.strategy {
            BoxStrategy::Switching => select_box(&est, mask_box.as_ref(), &seg.reg_box, &mut ts.smoothed),
            BoxStrategy::MaskOnly => (mask_box.unwrap_or(ts.bbox), Strategy::Mask),
            BoxStrategy::RegressionOnly => (ts.smoothed.smooth(&seg.reg_box), Strategy::Regression),
        };

        // feedback: global modelling
        if c.global_loop {
            let weights = match (c.global_filter, hint) {
                (Source::GroundTruth, Some(h)) => crop_grid(&weights_of(h.mask), &map_t, 0.0),
                _ => seg.prob.grid().clone(),
            };
            let f = self.segmenter.global_feature(frame, ts.id, &map_t, &weights)?;
            update_global(&mut ts.global, &f, est.state_score)?;
        }

        let full = paste_back(&seg.prob, &map_t, fw, fh)?;
        ts.bbox = keep_in_frame(next, fw, fh);
        ts.last_estimate = est;
        ts.frame_index = t;
        let telemetry = Telemetry {
            frame: t,
            object: ts.id,
            s_cf: est.confidence,
            s_cc: est.concentration,
            s_state: est.state_score,
            strategy,
            cx: ts.bbox.cx,
            cy: ts.bbox.cy,
            w: ts.bbox.w,
            h: ts.bbox.h,
        };
        Ok((full, telemetry))
    }
}

/// Final labels plus the per-object maps they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedLabels {
    /// `0` is background, `k` is the k-th input map.
    pub label_map: Grid<u8>,
    pub per_object_probs: Vec<ProbabilityMap>,
}

impl AggregatedLabels {
    /// Normalised `(background, p_1, ..., p_K)` at a pixel.
    pub fn distribution(&self, x: usize, y: usize) -> Vec<f64> {
        distribution(self.per_object_probs.iter().map(|p| *p.get(x, y)))
    }
}

fn distribution(ps: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let bg: f64 = ps.clone().map(|p| 1.0 - p).product();
    let mut out = vec![bg];
    out.extend(ps);
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

/// Product-of-complements background, normalisation, argmax with ties to
/// the background and then to the lower index.
pub fn aggregate(per_object: Vec<ProbabilityMap>) -> Result<AggregatedLabels> {
    let Some(first) = per_object.first() else {
        return Err(Error::InvalidParameter {
            name: "per_object",
            reason: "no maps to aggregate".into(),
        });
    };
    let (w, h) = first.shape();
    for p in &per_object {
        first.ensure_same_shape(p)?;
    }
    if per_object.len() > 255 {
        return Err(Error::InvalidParameter {
            name: "per_object",
            reason: "at most 255 objects".into(),
        });
    }
    let label_map = Grid::from_fn(w, h, |x, y| {
        let d = distribution(per_object.iter().map(|p| *p.get(x, y)));
        let mut best = 0;
        for (k, &v) in d.iter().enumerate().skip(1) {
            if v > d[best] {
                best = k;
            }
        }
        best as u8
    });
    Ok(AggregatedLabels {
        label_map,
        per_object_probs: per_object,
    })
}

/// Labels and telemetry of a tracked sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackOutput {
    /// One label map per frame, frame 0 being the initial annotation.
    pub labels: Vec<Grid<u8>>,
    pub telemetry: Vec<Telemetry>,
}

impl TrackOutput {
    /// `(mask, regression)` selection counts.
    pub fn strategy_counts(&self) -> (usize, usize) {
        let mask = self.telemetry.iter().filter(|t| t.strategy == Strategy::Mask).count();
        (mask, self.telemetry.len() - mask)
    }
}

/// Writes one CSV row per tracklet step.
pub fn write_telemetry_csv(path: &Path, telemetry: &[Telemetry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let mut row = |r: &[String]| w.write_record(r).map_err(|e| Error::file(path, e));
    row(&["frame", "object", "s_cf", "s_cc", "s_state", "strategy", "cx", "cy", "w", "h"].map(String::from))?;
    for t in telemetry {
        row(&[
            t.frame.to_string(),
            t.object.to_string(),
            format!("{:.6}", t.s_cf),
            format!("{:.6}", t.s_cc),
            format!("{:.6}", t.s_state),
            t.strategy.as_str().to_string(),
            format!("{:.3}", t.cx),
            format!("{:.3}", t.cy),
            format!("{:.3}", t.w),
            format!("{:.3}", t.h),
        ])?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Tracks every object of `init_labels` through `frame_count` frames, loading
/// frames on demand. `hints(t)` supplies per-object ground truth when the
/// config requests it. Tracklets run in parallel; results do not depend on
/// scheduling.
pub fn track_sequence<S: Segmenter>(
    tracker: &Tracker<'_, S>,
    frame_count: usize,
    mut load: impl FnMut(usize) -> Result<Image>,
    init_labels: &Grid<u8>,
    hints: Option<&dyn Fn(usize, u8) -> Option<BinaryMask>>,
) -> Result<TrackOutput> {
    let first = load(0)?;
    let ids = crate::davis::object_ids(init_labels);
    if ids.is_empty() {
        return Err(Error::EmptyMask("initial annotation has no objects"));
    }
    let mut tracklets = ids
        .iter()
        .map(|&id| tracker.init_tracklet(&first, &crate::davis::mask_for_id(init_labels, id), id))
        .collect::<Result<Vec<_>>>()?;
    let mut out = TrackOutput {
        labels: vec![init_labels.clone()],
        telemetry: Vec::new(),
    };
    drop(first);
    for t in 1..frame_count {
        let frame = load(t)?;
        let gt: Vec<Option<BinaryMask>> = ids.iter().map(|&id| hints.and_then(|f| f(t, id))).collect();
        let results = tracklets
            .par_iter_mut()
            .zip(&gt)
            .map(|(ts, g)| tracker.step_with_hint(ts, &frame, g.as_ref().map(|mask| Hint { mask })))
            .collect::<Result<Vec<_>>>()?;
        let (maps, tel): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let agg = aggregate(maps)?;
        out.labels.push(agg.label_map.map(|&k| if k == 0 { 0 } else { ids[k as usize - 1] }));
        out.telemetry.extend(tel);
    }
    Ok(out)
}

/// Segmenter backed by [`SegNet`].
pub struct NetworkSegmenter<'a> {
    pub net: &'a SegNet,
}

impl NetworkSegmenter<'_> {
    fn crop_tensor(frame: &Image, region: &CropTransform, size: usize) -> Result<Tensor> {
        Ok(Tensor::from_image(&crop_with_mean_fill(frame, &region.with_output_size(size))?))
    }
}

impl Segmenter for NetworkSegmenter<'_> {
    type Template = Template;

    fn crop_sizes(&self) -> CropSizes {
        let c = self.net.config();
        CropSizes {
            saliency: c.saliency_input,
            similarity: c.similarity_input,
            template: c.template_input,
            map: c.stride4_size(),
        }
    }

    fn embed(&self, frame: &Image, _object: u8, region: &CropTransform) -> Result<Template> {
        let size = self.net.config().template_input;
        self.net.embed_template(&Self::crop_tensor(frame, region, size)?)
    }

    fn global_feature(&self, frame: &Image, _object: u8, region: &CropTransform, weights: &Grid<f64>) -> Result<Tensor> {
        let size = self.net.config().global_input;
        let crop = crop_and_resize(frame, &region.with_output_size(size), &frame.channel_means())?;
        let resample = CropTransform::identity(weights.width(), weights.height())?.with_output_size(size);
        let filtered = crop.masked(&crop_grid(weights, &resample, 0.0))?;
        self.net.global_feature(&Tensor::from_image(&filtered))
    }

    fn segment(&self, frame: &Image, req: &SegmentRequest<'_, Template>) -> Result<Segmentation> {
        let c = self.net.config();
        let saliency = Self::crop_tensor(frame, &req.saliency, c.saliency_input)?;
        let search = Self::crop_tensor(frame, &req.similarity, c.similarity_input)?;
        let out = self.net.infer(&SegInputs {
            saliency: &saliency,
            search: &search,
            template: TemplateInput::Embedded(req.template),
            global: req.global.map_or(GlobalInput::None, GlobalInput::Feature),
        })?;
        Ok(Segmentation {
            prob: out.prob_stride4,
            reg_box: req.similarity.box_to_frame(&out.reg_box_crop),
        })
    }
}

#[cfg(test)]
mod tests;
