//! Synthetic moving-shape videos with scripted tracking difficulties, and an
//! oracle segmenter derived from their ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::davis;
use crate::error::{Error, Result};
use crate::geometry::{search_region_side, Box};
use crate::grid::{Grid, Image};
use crate::maskops::{BinaryMask, ProbabilityMap};

/// Colour painted over an occluded target.
pub const OCCLUDER_COLOR: [f32; 3] = [0.12, 0.12, 0.12];
/// Minimum fraction of target pixels an occluder hides.
pub const OCCLUSION_COVERAGE: f64 = 0.65;
/// Fraction of the target width left inside the frame during truncation.
pub const TRUNCATION_VISIBLE: f64 = 0.45;
/// Default fast-motion jump in units of the object's larger side.
pub const FAST_MOTION_JUMP: f64 = 1.8;
/// Default horizontal offset of a distractor, in object widths.
pub const DISTRACTOR_OFFSET: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Rectangle,
    LShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: [f32; 3],
    /// Width and height in pixels at scale 1.
    pub size: [f64; 2],
    /// `[frame, x, y]` keyframes of the centre, linearly interpolated.
    pub waypoints: Vec<[f64; 3]>,
    /// `[frame, scale]` keyframes; scale 1 when empty.
    #[serde(default)]
    pub scale: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Occlusion,
    Truncation,
    FastMotion,
    Disappearance,
    Distractor,
}

/// An event active on frames `start..end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub kind: EventKind,
    pub start: usize,
    pub end: usize,
    /// 1-based object index.
    #[serde(default = "default_object")]
    pub object: usize,
    /// Displacement `[dx, dy]` for `fast_motion` and `distractor`.
    #[serde(default)]
    pub offset: Option<[f64; 2]>,
}

fn default_object() -> usize {
    1
}
fn default_side() -> usize {
    256
}
fn default_background() -> [f32; 3] {
    [0.55, 0.6, 0.5]
}
fn default_name() -> String {
    "scene".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneScript {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    pub frame_count: usize,
    /// Amplitude of uniform pixel noise.
    #[serde(default)]
    pub noise: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_background")]
    pub background: [f32; 3],
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidScript(msg.into())
}

fn interpolate(keys: &[[f64; 2]], t: f64, default: f64) -> f64 {
    let Some(first) = keys.first() else {
        return default;
    };
    if t <= first[0] {
        return first[1];
    }
    for pair in keys.windows(2) {
        let ([t0, v0], [t1, v1]) = (pair[0], pair[1]);
        if t <= t1 {
            return if t1 > t0 { v0 + (v1 - v0) * (t - t0) / (t1 - t0) } else { v1 };
        }
    }
    keys[keys.len() - 1][1]
}

impl SceneScript {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::file(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scene scripts serialise")
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(invalid("frame_count must be positive"));
        }
        if self.width < 8 || self.height < 8 {
            return Err(invalid("frame must be at least 8x8"));
        }
        if self.objects.is_empty() || self.objects.len() > 255 {
            return Err(invalid("need between 1 and 255 objects"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(invalid("noise must lie in [0, 1]"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let n = i + 1;
            if o.waypoints.is_empty() {
                return Err(invalid(format!("object {n} has no waypoints")));
            }
            if o.waypoints.windows(2).any(|w| w[1][0] < w[0][0]) || o.scale.windows(2).any(|w| w[1][0] < w[0][0]) {
                return Err(invalid(format!("object {n} keyframes are not sorted")));
            }
            if !(o.size[0] >= 2.0 && o.size[1] >= 2.0) {
                return Err(invalid(format!("object {n} is smaller than 2 pixels")));
            }
            if o.scale.iter().any(|s| !(s[1] > 0.0)) {
                return Err(invalid(format!("object {n} has a non-positive scale")));
            }
            if o.color.iter().chain(&self.background).any(|c| !(0.0..=1.0).contains(c)) {
                return Err(invalid(format!("object {n} colour outside [0, 1]")));
            }
        }
        for e in &self.events {
            if e.start >= e.end || e.end > self.frame_count {
                return Err(invalid(format!(
                    "event {:?} range {}..{} outside 0..{}",
                    e.kind, e.start, e.end, self.frame_count
                )));
            }
            if e.object == 0 || e.object > self.objects.len() {
                return Err(invalid(format!("event {:?} names unknown object {}", e.kind, e.object)));
            }
        }
        Ok(())
    }

    fn active(&self, object: usize, t: usize, kind: EventKind) -> Option<&EventSpec> {
        self.events
            .iter()
            .find(|e| e.kind == kind && e.object == object + 1 && (e.start..e.end).contains(&t))
    }

    /// Scripted centre and size before events are applied.
    fn nominal(&self, object: usize, t: usize) -> (f64, f64, f64, f64) {
        let o = &self.objects[object];
        let tf = t as f64;
        let xs: Vec<[f64; 2]> = o.waypoints.iter().map(|w| [w[0], w[1]]).collect();
        let ys: Vec<[f64; 2]> = o.waypoints.iter().map(|w| [w[0], w[2]]).collect();
        let s = interpolate(&o.scale, tf, 1.0);
        (interpolate(&xs, tf, 0.0), interpolate(&ys, tf, 0.0), o.size[0] * s, o.size[1] * s)
    }

    fn toward_centre(&self, x: f64) -> f64 {
        if x < (self.width as f64 - 1.0) / 2.0 { 1.0 } else { -1.0 }
    }

    /// Displacement a `fast_motion` or `distractor` event applies.
    pub fn event_offset(&self, e: &EventSpec) -> [f64; 2] {
        if let Some(o) = e.offset {
            return o;
        }
        let (x, _, w, h) = self.nominal(e.object - 1, e.start);
        match e.kind {
            EventKind::FastMotion => [self.toward_centre(x) * FAST_MOTION_JUMP * w.max(h), 0.0],
            EventKind::Distractor => [self.toward_centre(x) * DISTRACTOR_OFFSET * w, 0.0],
            _ => [0.0, 0.0],
        }
    }

    /// Amodal box of an object at frame `t` after motion events.
    pub fn object_box(&self, object: usize, t: usize) -> Box {
        let (mut x, mut y, w, h) = self.nominal(object, t);
        if let Some(e) = self.active(object, t, EventKind::FastMotion) {
            let [dx, dy] = self.event_offset(e);
            x += dx;
            y += dy;
        }
        if self.active(object, t, EventKind::Truncation).is_some() {
            // straddle the nearest vertical border
            let shift = w / 2.0 - TRUNCATION_VISIBLE * w;
            x = if x < (self.width as f64 - 1.0) / 2.0 {
                -0.5 - shift
            } else {
                self.width as f64 - 0.5 + shift
            };
        }
        Box { cx: x, cy: y, w, h }
    }
}

fn shape_contains(kind: ShapeKind, b: &Box, x: f64, y: f64) -> bool {
    let dx = x - b.cx;
    let dy = y - b.cy;
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    match kind {
        ShapeKind::Rectangle => dx.abs() < hw && dy.abs() < hh,
        ShapeKind::Disk => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
        ShapeKind::LShape => dx.abs() < hw && dy.abs() < hh && !(dx > 0.0 && dy < 0.0),
    }
}

fn rasterize(kind: ShapeKind, b: &Box, width: usize, height: usize) -> BinaryMask {
    BinaryMask::from_fn(width, height, |x, y| shape_contains(kind, b, x as f64, y as f64))
}

/// Narrowest centred vertical band hiding at least [`OCCLUSION_COVERAGE`]
/// of `target`.
fn occluder_band(target: &BinaryMask, cx: f64) -> BinaryMask {
    let (w, h) = target.shape();
    let total = target.area();
    let mut half = 0.0;
    loop {
        let band = BinaryMask::from_fn(w, h, |x, _| (x as f64 - cx).abs() <= half);
        let covered = band
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .filter(|(a, b)| **a && **b)
            .count();
        if total == 0 || covered as f64 >= OCCLUSION_COVERAGE * total as f64 || half > w as f64 {
            return band;
        }
        half += 1.0;
    }
}

/// A rendered sequence with per-object ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub script: SceneScript,
    pub frames: Vec<Image>,
    /// `masks[t][k]`: visible pixels of object `k` in frame `t`.
    pub masks: Vec<Vec<BinaryMask>>,
    /// `amodal[t][k]`: unoccluded box of object `k`.
    pub amodal: Vec<Vec<Box>>,
    /// `distractors[t][k]`: pixels of the look-alike of object `k`.
    pub distractors: Vec<Vec<BinaryMask>>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn object_count(&self) -> usize {
        self.script.objects.len()
    }

    /// Label map with ids `1..=K`.
    pub fn labels(&self, t: usize) -> Grid<u8> {
        let pairs: Vec<(u8, &BinaryMask)> = self.masks[t]
            .iter()
            .enumerate()
            .map(|(k, m)| ((k + 1) as u8, m))
            .collect();
        davis::labels_from_masks(&pairs, self.script.width, self.script.height)
    }

    /// Writes frames and full annotations in the DAVIS layout under `root`.
    pub fn write_davis(&self, root: &Path) -> Result<()> {
        let images = root.join(davis::IMAGES_DIR).join(&self.script.name);
        let annotations = root.join(davis::ANNOTATIONS_DIR).join(&self.script.name);
        std::fs::create_dir_all(&images).map_err(|e| Error::file(&images, e))?;
        std::fs::create_dir_all(&annotations).map_err(|e| Error::file(&annotations, e))?;
        for (t, frame) in self.frames.iter().enumerate() {
            davis::write_frame_png(&images.join(format!("{}.png", davis::frame_name(t))), frame)?;
            davis::write_label_png(&davis::annotation_path(&annotations, t), &self.labels(t))?;
        }
        Ok(())
    }
}

pub fn render(script: &SceneScript) -> Result<SyntheticSequence> {
    script.validate()?;
    let (w, h) = (script.width, script.height);
    let n = script.objects.len();
    let mut out = SyntheticSequence {
        script: script.clone(),
        frames: Vec::with_capacity(script.frame_count),
        masks: Vec::with_capacity(script.frame_count),
        amodal: Vec::with_capacity(script.frame_count),
        distractors: Vec::with_capacity(script.frame_count),
    };
    for t in 0..script.frame_count {
        let mut frame = Image::new(3, w, h);
        for c in 0..3 {
            frame.as_mut_slice()[c * w * h..(c + 1) * w * h].fill(script.background[c]);
        }
        let paint = |frame: &mut Image, m: &BinaryMask, color: &[f32; 3]| {
            for (i, _) in m.as_slice().iter().enumerate().filter(|(_, b)| **b) {
                for (c, v) in color.iter().enumerate() {
                    frame.as_mut_slice()[c * w * h + i] = *v;
                }
            }
        };

        let boxes: Vec<Box> = (0..n).map(|k| script.object_box(k, t)).collect();
        let mut distractors = Vec::with_capacity(n);
        for (k, o) in script.objects.iter().enumerate() {
            let d = match script.active(k, t, EventKind::Distractor) {
                Some(e) => {
                    let [dx, dy] = script.event_offset(e);
                    rasterize(o.shape, &boxes[k].translated(dx, dy), w, h)
                }
                None => BinaryMask::empty(w, h),
            };
            paint(&mut frame, &d, &o.color);
            distractors.push(d);
        }

        let mut masks: Vec<Grid<bool>> = Vec::with_capacity(n);
        for (k, o) in script.objects.iter().enumerate() {
            let m = if script.active(k, t, EventKind::Disappearance).is_some() {
                BinaryMask::empty(w, h)
            } else {
                rasterize(o.shape, &boxes[k], w, h)
            };
            paint(&mut frame, &m, &o.color);
            // later objects hide earlier ones
            for prev in masks.iter_mut() {
                for (p, &b) in prev.as_mut_slice().iter_mut().zip(m.as_slice()) {
                    *p &= !b;
                }
            }
            masks.push(m.grid().clone());
        }

        for k in 0..n {
            if script.active(k, t, EventKind::Occlusion).is_none() {
                continue;
            }
            let band = occluder_band(&BinaryMask::new(masks[k].clone()), boxes[k].cx);
            paint(&mut frame, &band, &OCCLUDER_COLOR);
            for m in masks.iter_mut() {
                for (p, &b) in m.as_mut_slice().iter_mut().zip(band.as_slice()) {
                    *p &= !b;
                }
            }
        }

        if script.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
            rng.set_stream(t as u64);
            for v in frame.as_mut_slice() {
                *v = (*v + rng.gen_range(-script.noise..=script.noise)).clamp(0.0, 1.0);
            }
        }
        out.frames.push(frame);
        out.masks.push(masks.into_iter().map(BinaryMask::new).collect());
        out.amodal.push(boxes);
        out.distractors.push(distractors);
    }
    Ok(out)
}

/// Half-open frame range with a confidence multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySpan {
    pub start: usize,
    pub end: usize,
    pub quality: f64,
}

/// Ground-truth-derived stand-in for the segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSegmenter {
    /// Probability of flipping a pixel near the object.
    pub flip_rate: f64,
    /// Maximum dilation/erosion radius applied per frame.
    pub jitter_radius: usize,
    pub schedule: Vec<QualitySpan>,
    pub seed: u64,
}

impl Default for OracleSegmenter {
    fn default() -> Self {
        Self::exact()
    }
}

impl OracleSegmenter {
    pub fn exact() -> Self {
        Self {
            flip_rate: 0.0,
            jitter_radius: 0,
            schedule: Vec::new(),
            seed: 0,
        }
    }

    pub fn quality(&self, t: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|s| (s.start..s.end).contains(&t))
            .fold(1.0, |q, s| q * s.quality)
    }
}

fn morph(m: &BinaryMask, grow: bool) -> BinaryMask {
    let (w, h) = m.shape();
    BinaryMask::from_fn(w, h, |x, y| {
        let mut any = false;
        let mut all = true;
        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                let v = *m.get(xx, yy);
                any |= v;
                all &= v;
            }
        }
        if grow { any } else { all }
    })
}

/// Noisy probability map around `gt`: random boundary jitter, pixel flips
/// inside the object's box grown by 2, then scaled by the frame quality.
pub fn oracle_predict(gt: &BinaryMask, oracle: &OracleSegmenter, frame_index: usize) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(oracle.seed);
    rng.set_stream(frame_index as u64);
    let mut m = gt.clone();
    if oracle.jitter_radius > 0 {
        let r = rng.gen_range(-(oracle.jitter_radius as i64)..=oracle.jitter_radius as i64);
        for _ in 0..r.unsigned_abs() {
            m = morph(&m, r > 0);
        }
    }
    let q = oracle.quality(frame_index);
    let mut p = m.map(|&b| if b { 1.0 } else { 0.0 });
    if oracle.flip_rate > 0.0 {
        if let Some(b) = gt.bounding_box() {
            let (w, h) = gt.shape();
            let (x0, y0, x1, y1) = b.corners();
            let xs = (x0 - 2.0).max(0.0).ceil() as usize;
            let ys = (y0 - 2.0).max(0.0).ceil() as usize;
            let xe = ((x1 + 2.0).floor() as usize).min(w - 1);
            let ye = ((y1 + 2.0).floor() as usize).min(h - 1);
            for y in ys..=ye {
                for x in xs..=xe {
                    if rng.gen_bool(oracle.flip_rate) {
                        let v = *p.get(x, y);
                        p.set(x, y, 1.0 - v);
                    }
                }
            }
        }
    }
    if q != 1.0 {
        for v in p.as_mut_slice() {
            *v *= q;
        }
    }
    ProbabilityMap::from_grid_clamped(p)
}

fn disk(color: [f32; 3], side: f64, waypoints: Vec<[f64; 3]>) -> ObjectSpec {
    ObjectSpec {
        shape: ShapeKind::Disk,
        color,
        size: [side, side],
        waypoints,
        scale: Vec::new(),
    }
}

/// A single object drifting slowly across a lightly noisy background.
pub fn easy_script(name: &str, frame_count: usize, seed: u64) -> SceneScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 128.0;
    let shapes = [ShapeKind::Disk, ShapeKind::Rectangle, ShapeKind::LShape];
    let size = rng.gen_range(22.0..34.0);
    let start = [rng.gen_range(36.0..92.0), rng.gen_range(36.0..92.0)];
    let end = [rng.gen_range(36.0..92.0), rng.gen_range(36.0..92.0)];
    let last = frame_count.saturating_sub(1) as f64;
    SceneScript {
        name: name.into(),
        width: side as usize,
        height: side as usize,
        frame_count,
        noise: 0.03,
        seed,
        background: default_background(),
        objects: vec![ObjectSpec {
            shape: shapes[rng.gen_range(0..3)],
            color: [rng.gen_range(0.75..1.0), rng.gen_range(0.0..0.3), rng.gen_range(0.0..0.4)],
            size: [size, size * rng.gen_range(0.8..1.2)],
            waypoints: vec![[0.0, start[0], start[1]], [last, end[0], end[1]]],
            scale: vec![[0.0, 1.0], [last, rng.gen_range(0.85..1.15)]],
        }],
        events: Vec::new(),
    }
}

/// Ten 128² sequences, each with an early fast-motion jump and a later
/// occlusion, plus a rotation of truncation, disappearance and distractor
/// events.
pub fn ablation_suite(seed: u64) -> Vec<SceneScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = 48;
    let palette = [[0.9, 0.2, 0.2], [0.2, 0.3, 0.9], [0.95, 0.8, 0.1], [0.6, 0.1, 0.7], [0.1, 0.75, 0.8]];
    (0..10)
        .map(|i| {
            let side = rng.gen_range(16.0..22.0);
            let left = i % 2 == 0;
            let x0 = if left { rng.gen_range(26.0..36.0) } else { rng.gen_range(92.0..102.0) };
            let y0 = rng.gen_range(40.0..88.0);
            let drift = rng.gen_range(-6.0..6.0);
            let mut obj = disk(palette[i % palette.len()], side, vec![[0.0, x0, y0], [47.0, x0, y0 + drift]]);
            if i % 3 == 1 {
                obj.shape = ShapeKind::Rectangle;
            }
            let jump = rng.gen_range(8..14);
            let mut events = vec![
                EventSpec {
                    kind: EventKind::FastMotion,
                    start: jump,
                    end: frames,
                    object: 1,
                    offset: None,
                },
                EventSpec {
                    kind: EventKind::Occlusion,
                    start: 28,
                    end: 32,
                    object: 1,
                    offset: None,
                },
            ];
            let extra = match i % 3 {
                0 => EventKind::Disappearance,
                1 => EventKind::Distractor,
                _ => EventKind::Truncation,
            };
            let (start, end) = if extra == EventKind::Truncation { (2, 5) } else { (38, 42) };
            events.push(EventSpec {
                kind: extra,
                start,
                end,
                object: 1,
                offset: None,
            });
            SceneScript {
                name: format!("suite{i:02}"),
                width: 128,
                height: 128,
                frame_count: frames,
                noise: 0.02,
                seed: seed.wrapping_add(i as u64),
                background: default_background(),
                objects: vec![obj],
                events,
            }
        })
        .collect()
}

/// Whether a `fast_motion` event moves its object farther than half the
/// side of the saliency region around the pre-jump box.
pub fn fast_motion_exceeds_search(script: &SceneScript, e: &EventSpec, saliency_context: f64) -> bool {
    let before = script.object_box(e.object - 1, e.start.saturating_sub(1));
    let [dx, dy] = script.event_offset(e);
    dx.hypot(dy) > 0.5 * search_region_side(&before, saliency_context)
}
