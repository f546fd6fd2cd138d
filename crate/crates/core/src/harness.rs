//! Runs the tracker on synthetic sequences with the oracle segmenter in
//! place of the network, isolating the state-estimation and feedback logic.

use serde::{Deserialize, Serialize};

use crate::davis;
use crate::error::{Error, Result};
use crate::eval::region_j;
use crate::geometry::{crop_grid, crop_with_mean_fill, Box, CropTransform};
use crate::grid::{Grid, Image};
use crate::maskops::BinaryMask;
use crate::synthdata::{oracle_predict, render, OracleSegmenter, SceneScript, SyntheticSequence};
use crate::tensor::Tensor;
use crate::tracker::{
    track_sequence, CropSizes, SegmentRequest, Segmentation, Segmenter, TrackOutput, Tracker, TrackerConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessSettings {
    pub oracle: OracleSegmenter,
    /// Side of the oracle's probability map.
    pub map_size: usize,
    /// Probability the oracle assigns to a look-alike distractor when it
    /// has no appearance model.
    pub distractor_leak: f64,
    /// Colour distance scale at which the global feature stops
    /// suppressing the distractor.
    pub appearance_sigma: f64,
}

impl Default for HarnessSettings {
    fn default() -> Self {
        Self {
            oracle: OracleSegmenter {
                flip_rate: 0.01,
                jitter_radius: 1,
                schedule: Vec::new(),
                seed: 17,
            },
            map_size: 64,
            distractor_leak: 0.75,
            appearance_sigma: 0.15,
        }
    }
}

/// Per-frame ground truth the oracle reads from.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTruth {
    pub ids: Vec<u8>,
    /// `masks[t][k]`: visible pixels of object `ids[k]`.
    pub masks: Vec<Vec<BinaryMask>>,
    /// Unoccluded boxes; `None` when the object is not in the frame.
    pub amodal: Vec<Vec<Option<Box>>>,
    pub distractors: Vec<Vec<BinaryMask>>,
    pub colors: Vec<[f32; 3]>,
}

impl OracleTruth {
    pub fn from_synthetic(seq: &SyntheticSequence) -> Self {
        let n = seq.object_count();
        Self {
            ids: (1..=n as u8).collect(),
            masks: seq.masks.clone(),
            amodal: seq.amodal.iter().map(|f| f.iter().copied().map(Some).collect()).collect(),
            distractors: seq.distractors.clone(),
            colors: seq.script.objects.iter().map(|o| o.color).collect(),
        }
    }

    /// Truth from annotated label maps: boxes are the visible extents and
    /// there are no distractors.
    pub fn from_labels(labels: &[Grid<u8>]) -> Self {
        let mut ids: Vec<u8> = labels.iter().flat_map(davis::object_ids).collect();
        ids.sort_unstable();
        ids.dedup();
        let masks: Vec<Vec<BinaryMask>> = labels
            .iter()
            .map(|l| ids.iter().map(|&id| davis::mask_for_id(l, id)).collect())
            .collect();
        Self {
            amodal: masks.iter().map(|f| f.iter().map(BinaryMask::bounding_box).collect()).collect(),
            distractors: masks
                .iter()
                .map(|f| f.iter().map(|m| BinaryMask::empty(m.width(), m.height())).collect())
                .collect(),
            colors: vec![[0.0; 3]; ids.len()],
            ids,
            masks,
        }
    }

    fn index(&self, id: u8) -> Result<usize> {
        self.ids.iter().position(|&i| i == id).ok_or(Error::InvalidParameter {
            name: "object",
            reason: format!("object {id} has no ground truth"),
        })
    }

    fn frame(&self, t: usize) -> Result<usize> {
        if t < self.masks.len() {
            Ok(t)
        } else {
            Err(Error::InvalidParameter {
                name: "frame_index",
                reason: format!("frame {t} has no ground truth"),
            })
        }
    }
}

/// Ground-truth-driven [`Segmenter`]. The global feature is the weighted
/// mean colour under the filter mask; a feature close to the target colour
/// lets the oracle reject the distractor.
pub struct OracleHarness<'a> {
    pub truth: &'a OracleTruth,
    pub settings: HarnessSettings,
}

fn to_weights(m: &BinaryMask) -> Grid<f64> {
    m.map(|&b| if b { 1.0 } else { 0.0 })
}

fn crop_mask(m: &BinaryMask, region: &CropTransform) -> BinaryMask {
    BinaryMask::new(crop_grid(&to_weights(m), region, 0.0).map(|&v| v >= 0.5))
}

impl OracleHarness<'_> {
    fn object_oracle(&self, object: u8) -> OracleSegmenter {
        OracleSegmenter {
            seed: self.settings.oracle.seed ^ ((object as u64) << 32),
            ..self.settings.oracle.clone()
        }
    }

    /// How well `g` matches the object's colour, in (0, 1].
    pub fn appearance_match(&self, k: usize, g: &Tensor) -> f64 {
        let color = self.truth.colors[k];
        let d2: f64 = g.data.iter().zip(color).map(|(a, b)| (a - b as f64).powi(2)).sum();
        let s = self.settings.appearance_sigma;
        (-d2 / (2.0 * s * s)).exp()
    }
}

impl Segmenter for OracleHarness<'_> {
    type Template = ();

    fn crop_sizes(&self) -> CropSizes {
        let m = self.settings.map_size;
        CropSizes {
            saliency: m,
            similarity: m,
            template: m,
            map: m,
        }
    }

    fn embed(&self, _frame: &Image, _object: u8, _region: &CropTransform) -> Result<()> {
        Ok(())
    }

    fn global_feature(&self, frame: &Image, _object: u8, region: &CropTransform, weights: &Grid<f64>) -> Result<Tensor> {
        let crop = crop_with_mean_fill(frame, &region.with_output_size(weights.width()))?;
        let total: f64 = weights.as_slice().iter().sum();
        let data = (0..crop.channels())
            .map(|c| {
                let s: f64 = crop.plane(c).iter().zip(weights.as_slice()).map(|(&v, &w)| v as f64 * w).sum();
                s / total
            })
            .collect();
        Tensor::from_vec(crop.channels(), 1, 1, data)
    }

    fn segment(&self, _frame: &Image, req: &SegmentRequest<'_, ()>) -> Result<Segmentation> {
        let k = self.truth.index(req.object)?;
        let t = self.truth.frame(req.frame_index)?;
        let map = req.saliency.with_output_size(self.settings.map_size);
        let gt = &self.truth.masks[t][k];
        let mut prob = oracle_predict(&crop_mask(gt, &map), &self.object_oracle(req.object), t).into_grid();

        let distractor = &self.truth.distractors[t][k];
        if !distractor.is_empty_mask() {
            let suppression = req.global.map_or(0.0, |g| self.appearance_match(k, g));
            let leak = self.settings.distractor_leak * (1.0 - suppression);
            let d = crop_mask(distractor, &map);
            for (p, &b) in prob.as_mut_slice().iter_mut().zip(d.as_slice()) {
                if b {
                    *p = p.max(leak);
                }
            }
        }

        let sim = req.similarity.with_output_size(self.settings.map_size);
        let reg_box = match self.truth.amodal[t][k] {
            Some(b) if !crop_mask(gt, &sim).is_empty_mask() => b,
            _ => req.prior,
        };
        Ok(Segmentation {
            prob: crate::maskops::ProbabilityMap::from_grid_clamped(prob),
            reg_box,
        })
    }
}

/// Tracks a rendered sequence with the oracle; ground truth is passed as a
/// hint so upper-bound configs can use it.
pub fn track_synthetic(seq: &SyntheticSequence, config: &TrackerConfig, settings: &HarnessSettings) -> Result<TrackOutput> {
    let truth = OracleTruth::from_synthetic(seq);
    let harness = OracleHarness {
        truth: &truth,
        settings: settings.clone(),
    };
    let tracker = Tracker::new(&harness, config.clone())?;
    let hints = |t: usize, id: u8| Some(seq.masks[t][id as usize - 1].clone());
    track_sequence(&tracker, seq.len(), |t| Ok(seq.frames[t].clone()), &seq.labels(0), Some(&hints))
}

/// Mean J over frames after the first, averaged over objects.
pub fn mean_iou(seq: &SyntheticSequence, out: &TrackOutput) -> Result<f64> {
    let n = seq.object_count();
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..n {
        let id = (k + 1) as u8;
        for t in 1..seq.len() {
            total += region_j(&davis::mask_for_id(&out.labels[t], id), &seq.masks[t][k])?;
            count += 1;
        }
    }
    Ok(if count == 0 { 1.0 } else { total / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub per_sequence: Vec<f64>,
    pub mean_iou: f64,
    /// Fraction of frames that selected the mask-box.
    pub mask_rate: f64,
}

pub fn run_suite(scripts: &[SceneScript], config: &TrackerConfig, settings: &HarnessSettings) -> Result<SuiteResult> {
    let mut per_sequence = Vec::with_capacity(scripts.len());
    let (mut mask, mut frames) = (0usize, 0usize);
    for s in scripts {
        let seq = render(s)?;
        let out = track_synthetic(&seq, config, settings)?;
        let (m, r) = out.strategy_counts();
        mask += m;
        frames += m + r;
        per_sequence.push(mean_iou(&seq, &out)?);
    }
    let mean = per_sequence.iter().sum::<f64>() / per_sequence.len().max(1) as f64;
    Ok(SuiteResult {
        per_sequence,
        mean_iou: mean,
        mask_rate: if frames == 0 { 0.0 } else { mask as f64 / frames as f64 },
    })
}
