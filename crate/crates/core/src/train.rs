//! Desk-scale training: pair sampling, the warm-up plus cosine schedule,
//! momentum SGD with the first-stage parameters frozen, and a synthetic
//! regression pretraining routine standing in for the first stage.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::davis;
use crate::error::{Error, Result};
use crate::eval::{boundary_f, default_tolerance, jf_mean, region_j};
use crate::geometry::{crop_grid, crop_with_mean_fill, make_search_region, Box, CropTransform};
use crate::grid::{Grid, Image};
use crate::maskops::{binarize, BinaryMask, ProbabilityMap};
use crate::segnet::{
    bce_with_logits, loss_with_grad, soft_iou, Grads, GlobalInput, LossBreakdown, LossTargets, NetworkConfig,
    SegInputs, SegNet, TemplateInput, STAGE_ONE_PREFIXES,
};
use crate::synthdata::{easy_script, render, SyntheticSequence};
use crate::tensor::Tensor;
use crate::tracker::{template_region, CropSizes};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Weights of the stride-8 and stride-16 auxiliary losses.
    pub aux_weights: [f64; 2],
    pub samples_per_epoch: usize,
    pub validation_pairs: usize,
    /// Steps of synthetic regression pretraining run before the main loop.
    pub pretrain_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            warmup_epochs: 2,
            lr_start: 1e-5,
            lr_peak: 1e-2,
            momentum: 0.9,
            batch_size: 4,
            aux_weights: [0.5, 0.3],
            samples_per_epoch: 2000,
            validation_pairs: 64,
            pretrain_steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &'static str, reason: &str| {
            Err(Error::InvalidParameter {
                name,
                reason: reason.into(),
            })
        };
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", "must be smaller than a positive epoch count");
        }
        if self.batch_size == 0 || self.samples_per_epoch < self.batch_size {
            return bad("batch_size", "must be positive and at most samples_per_epoch");
        }
        if self.aux_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("aux_weights", "must be nonnegative");
        }
        if !(self.lr_start >= 0.0 && self.lr_peak > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr_peak", "learning rates must be positive and momentum in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch / self.batch_size
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch()
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch()
    }

    fn aux(&self) -> (f64, f64) {
        (self.aux_weights[0], self.aux_weights[1])
    }
}

/// Linear warm-up from `lr_start` to `lr_peak`, then cosine annealing to 0.
pub fn lr_at(step: usize, config: &TrainConfig) -> f64 {
    let warm = config.warmup_steps();
    if step < warm {
        return config.lr_start + (config.lr_peak - config.lr_start) * step as f64 / warm as f64;
    }
    let rest = config.total_steps().saturating_sub(warm).max(1);
    let u = ((step - warm) as f64 / rest as f64).min(1.0);
    config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
}

/// One object's frames and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub frames: Vec<Image>,
    pub masks: Vec<BinaryMask>,
}

/// Tracks that pairs are drawn from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairSource {
    pub tracks: Vec<Track>,
}

impl PairSource {
    pub fn from_synthetic(seqs: &[SyntheticSequence]) -> Self {
        let tracks = seqs
            .iter()
            .flat_map(|s| {
                (0..s.object_count()).map(move |k| Track {
                    frames: s.frames.clone(),
                    masks: s.masks.iter().map(|m| m[k].clone()).collect(),
                })
            })
            .collect();
        Self { tracks }
    }

    /// `count` rendered easy sequences of `frames` frames each.
    pub fn easy(count: usize, frames: usize, seed: u64) -> Result<Self> {
        let seqs = (0..count)
            .map(|i| render(&easy_script(&format!("train{i:03}"), frames, seed.wrapping_mul(1000).wrapping_add(i as u64))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_synthetic(&seqs))
    }

    /// Every sequence of a DAVIS-layout directory with full annotations.
    pub fn from_davis(root: &Path) -> Result<Self> {
        let images = root.join(davis::IMAGES_DIR);
        let annotations = root.join(davis::ANNOTATIONS_DIR);
        let mut names: Vec<_> = std::fs::read_dir(&images)
            .map_err(|e| Error::file(&images, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name())
            .collect();
        names.sort();
        let mut tracks = Vec::new();
        for name in names {
            let frames = davis::list_frames(&images.join(&name))?
                .iter()
                .map(|p| davis::read_frame(p))
                .collect::<Result<Vec<_>>>()?;
            let labels = (0..frames.len())
                .map(|t| davis::read_label_png(&davis::annotation_path(&annotations.join(&name), t)))
                .collect::<Result<Vec<_>>>()?;
            let mut ids: Vec<u8> = labels.iter().flat_map(davis::object_ids).collect();
            ids.sort_unstable();
            ids.dedup();
            for id in ids {
                tracks.push(Track {
                    frames: frames.clone(),
                    masks: labels.iter().map(|l| davis::mask_for_id(l, id)).collect(),
                });
            }
        }
        if tracks.is_empty() {
            return Err(Error::file(root, "no annotated sequences found"));
        }
        Ok(Self { tracks })
    }
}

/// Crop jitter and frame gap used when drawing pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub max_frame_gap: usize,
    /// Centre shift as a fraction of the box size.
    pub shift: f64,
    /// Log-scale jitter of width and height.
    pub scale: f64,
    pub saliency_context: f64,
    pub similarity_context: f64,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            max_frame_gap: 4,
            shift: 0.15,
            scale: 0.15,
            saliency_context: 1.0,
            similarity_context: 2.0,
        }
    }
}

/// A target/search pair from one sequence, already cropped to network
/// inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub template: Tensor,
    /// Target crop with the background zeroed by the ground-truth mask.
    pub global: Tensor,
    pub saliency: Tensor,
    pub search: Tensor,
    /// Ground truth over the saliency crop at input resolution.
    pub mask: Grid<f64>,
    pub targets: LossTargets,
    /// Search-frame object box in similarity-crop coordinates.
    pub search_box: Box,
    /// Both crops come from the same track.
    pub same_sequence: bool,
}

fn weights(m: &BinaryMask) -> Grid<f64> {
    m.map(|&b| if b { 1.0 } else { 0.0 })
}

fn crop_tensor(frame: &Image, region: &CropTransform) -> Result<Tensor> {
    Ok(Tensor::from_image(&crop_with_mean_fill(frame, region)?))
}

pub fn sample_pair(source: &PairSource, config: &NetworkConfig, sampling: &PairSampling, rng: &mut impl Rng) -> Result<TrainingPair> {
    let usable: Vec<&Track> = source
        .tracks
        .iter()
        .filter(|t| t.masks.iter().any(|m| !m.is_empty_mask()))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyMask("no track has a visible object"));
    }
    let track = usable[rng.gen_range(0..usable.len())];
    let visible: Vec<usize> = (0..track.masks.len()).filter(|&t| !track.masks[t].is_empty_mask()).collect();
    let i = visible[rng.gen_range(0..visible.len())];
    let near: Vec<usize> = visible.iter().copied().filter(|&t| t.abs_diff(i) <= sampling.max_frame_gap).collect();
    let j = near[rng.gen_range(0..near.len())];

    let sizes = CropSizes {
        saliency: config.saliency_input,
        similarity: config.similarity_input,
        template: config.template_input,
        map: config.stride4_size(),
    };
    let bi = track.masks[i].bounding_box().expect("visible");
    let template = crop_tensor(&track.frames[i], &template_region(&bi, sampling.similarity_context, &sizes)?)?;
    let g_region = make_search_region(&bi, sampling.saliency_context, config.global_input)?;
    let g_crop = crop_with_mean_fill(&track.frames[i], &g_region)?;
    let global = Tensor::from_image(&g_crop.masked(&crop_grid(&weights(&track.masks[i]), &g_region, 0.0))?);

    let bj = track.masks[j].bounding_box().expect("visible");
    let jitter = Box {
        cx: bj.cx + rng.gen_range(-sampling.shift..=sampling.shift) * bj.w,
        cy: bj.cy + rng.gen_range(-sampling.shift..=sampling.shift) * bj.h,
        w: bj.w * rng.gen_range(-sampling.scale..=sampling.scale).exp(),
        h: bj.h * rng.gen_range(-sampling.scale..=sampling.scale).exp(),
    };
    let sal = make_search_region(&jitter, sampling.saliency_context, config.saliency_input)?;
    let sim = make_search_region(&jitter, sampling.similarity_context, config.similarity_input)?;
    let mask = crop_grid(&weights(&track.masks[j]), &sal, 0.0);
    Ok(TrainingPair {
        template,
        global,
        saliency: crop_tensor(&track.frames[j], &sal)?,
        search: crop_tensor(&track.frames[j], &sim)?,
        targets: LossTargets::from_mask(&mask, config),
        mask,
        search_box: sim.box_to_crop(&bj),
        same_sequence: true,
    })
}

pub fn sample_pairs(source: &PairSource, config: &NetworkConfig, sampling: &PairSampling, n: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sample_pair(source, config, sampling, &mut rng)).collect()
}

fn inputs(p: &TrainingPair) -> SegInputs<'_> {
    SegInputs {
        saliency: &p.saliency,
        search: &p.search,
        template: TemplateInput::Image(&p.template),
        global: GlobalInput::Image(&p.global),
    }
}

fn pair_grad(net: &SegNet, p: &TrainingPair, aux: (f64, f64)) -> Result<(LossBreakdown, Grads)> {
    let (_, cache) = net.forward(&inputs(p))?;
    let (l, d) = loss_with_grad(&cache, &p.targets, aux)?;
    Ok((l, net.backward(&cache, [&d[0], &d[1], &d[2]])))
}

/// Held-out quality of the stride-4 prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub soft_iou: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub jf_mean: f64,
}

/// Soft IoU at stride 4 and J/F of the prediction resampled to the
/// saliency crop and binarised at 0.5.
pub fn validate(net: &SegNet, pairs: &[TrainingPair]) -> Result<Validation> {
    let c = net.config();
    let n = c.saliency_input;
    let scores = pairs
        .par_iter()
        .map(|p| {
            let out = net.infer(&inputs(p))?;
            let s = soft_iou(out.prob_stride4.grid(), &p.targets.stride4);
            let up = CropTransform::identity(c.stride4_size(), c.stride4_size())?.with_output_size(n);
            let pred = binarize(&ProbabilityMap::from_grid_clamped(crop_grid(out.prob_stride4.grid(), &up, 0.0)), 0.5);
            let gt = BinaryMask::new(p.mask.map(|&v| v >= 0.5));
            Ok((s, region_j(&pred, &gt)?, boundary_f(&pred, &gt, default_tolerance(n, n))?))
        })
        .collect::<Result<Vec<_>>>()?;
    let k = scores.len().max(1) as f64;
    let soft_iou = scores.iter().map(|s| s.0).sum::<f64>() / k;
    let j_mean = scores.iter().map(|s| s.1).sum::<f64>() / k;
    let f_mean = scores.iter().map(|s| s.2).sum::<f64>() / k;
    Ok(Validation {
        soft_iou,
        j_mean,
        f_mean,
        jf_mean: jf_mean(j_mean, f_mean),
    })
}

fn is_stage_one(name: &str) -> bool {
    STAGE_ONE_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Fingerprint of the frozen first-stage parameters.
pub fn frozen_fingerprint(net: &SegNet) -> u64 {
    net.params().fingerprint(is_stage_one)
}

/// Momentum SGD over a selected subset of parameters:
/// `v = m v + g; w -= lr v`.
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
    trainable: Vec<bool>,
}

impl Sgd {
    pub fn new(net: &SegNet, momentum: f64, trainable: impl Fn(&str) -> bool) -> Self {
        Self {
            momentum,
            velocity: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            trainable: net.params().iter().map(|p| trainable(&p.name)).collect(),
        }
    }

    pub fn step(&mut self, net: &mut SegNet, grads: &Grads, lr: f64) {
        for (i, g) in grads.0.iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let v = &mut self.velocity[i];
            let w = &mut net.params_mut().get_mut(i).data;
            for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *w -= lr * *v;
            }
        }
    }
}

/// One logged optimisation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_stride4: f64,
    pub loss_stride8: f64,
    pub loss_stride16: f64,
    /// Filled on the last step of an epoch.
    pub val_iou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub stride4: f64,
    pub stride8: f64,
    pub stride16: f64,
    pub validation: Validation,
}

/// Second-stage trainer: the similarity encoder and regression head stay
/// fixed.
pub struct Trainer {
    pub net: SegNet,
    pub config: TrainConfig,
    pub sampling: PairSampling,
    pub step: usize,
    pub log: Vec<StepRecord>,
    sgd: Sgd,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: SegNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = Sgd::new(&net, config.momentum, |n| !is_stage_one(n));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            net,
            config,
            sampling: PairSampling::default(),
            step: 0,
            log: Vec::new(),
            sgd,
            rng,
        })
    }

    /// Averages per-pair gradients (computed in parallel, summed in batch
    /// order) and applies one SGD step.
    pub fn train_step(&mut self, batch: &[TrainingPair]) -> Result<LossBreakdown> {
        let aux = self.config.aux();
        let net = &self.net;
        let results = batch
            .par_iter()
            .map(|p| pair_grad(net, p, aux))
            .collect::<Result<Vec<_>>>()?;
        let n = results.len() as f64;
        let mut total = LossBreakdown {
            total: 0.0,
            stride4: 0.0,
            stride8: 0.0,
            stride16: 0.0,
        };
        let mut grads = self.net.params().zero_grads();
        for (l, g) in &results {
            total.total += l.total / n;
            total.stride4 += l.stride4 / n;
            total.stride8 += l.stride8 / n;
            total.stride16 += l.stride16 / n;
            grads.add_assign(g);
        }
        grads.scale(1.0 / n);
        if !total.total.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!(
                    "loss {:?}, gradient norm {}, lr {}",
                    total,
                    grads.l2_norm(),
                    lr_at(self.step, &self.config)
                ),
            });
        }
        let lr = lr_at(self.step, &self.config);
        self.sgd.step(&mut self.net, &grads, lr);
        self.log.push(StepRecord {
            step: self.step,
            lr,
            loss: total.total,
            loss_stride4: total.stride4,
            loss_stride8: total.stride8,
            loss_stride16: total.stride16,
            val_iou: None,
        });
        self.step += 1;
        Ok(total)
    }

    pub fn train_epoch(&mut self, source: &PairSource, validation: &[TrainingPair]) -> Result<EpochMetrics> {
        let steps = self.config.steps_per_epoch();
        let mut sums = [0.0; 4];
        for _ in 0..steps {
            let batch = (0..self.config.batch_size)
                .map(|_| sample_pair(source, self.net.config(), &self.sampling, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            let l = self.train_step(&batch)?;
            for (s, v) in sums.iter_mut().zip([l.total, l.stride4, l.stride8, l.stride16]) {
                *s += v / steps as f64;
            }
        }
        let v = validate(&self.net, validation)?;
        if let Some(last) = self.log.last_mut() {
            last.val_iou = Some(v.soft_iou);
        }
        Ok(EpochMetrics {
            epoch: self.step / steps,
            mean_loss: sums[0],
            stride4: sums[1],
            stride8: sums[2],
            stride16: sums[3],
            validation: v,
        })
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
        for r in &self.log {
            w.serialize(r).map_err(|e| Error::file(path, e))?;
        }
        w.flush().map_err(|e| Error::file(path, e))?;
        Ok(())
    }
}

/// Smooth-L1 value and derivative.
fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 { (0.5 * x * x, x) } else { (x.abs() - 0.5, x.signum()) }
}

/// Regression objective for one pair: logit BCE on the classification map
/// (positive where the grid point falls in the central half of the box)
/// plus smooth-L1 on log edge distances at positive points.
pub fn regression_loss(net: &SegNet, p: &TrainingPair) -> Result<(f64, Grads)> {
    let c = net.config();
    let (maps, cache) = net.regression_forward_train(&p.search, &p.template)?;
    let m = maps.cls.w;
    let base = c.regression_base();
    let b = &p.search_box;
    let (x0, y0, x1, y1) = b.corners();
    let mut labels = vec![0.0; m * m];
    let mut dltrb = Tensor::zeros(4, m, m);
    let mut reg_loss = 0.0;
    let positives: Vec<(usize, [f64; 4])> = (0..m * m)
        .filter_map(|i| {
            let x = c.correlation_position(i % m);
            let y = c.correlation_position(i / m);
            let inside = (x - b.cx).abs() <= b.w / 4.0 && (y - b.cy).abs() <= b.h / 4.0;
            inside.then_some((i, [x - x0, y - y0, x1 - x, y1 - y]))
        })
        .collect();
    let np = positives.len().max(1) as f64;
    for (i, d) in &positives {
        labels[*i] = 1.0;
        for (k, dist) in d.iter().enumerate() {
            let target = (dist.max(1e-3) / base).ln();
            let (l, g) = smooth_l1(maps.ltrb.data[k * m * m + i] - target);
            reg_loss += l / np;
            dltrb.data[k * m * m + i] = g / np;
        }
    }
    let (cls_loss, dcls) = bce_with_logits(&maps.cls.data, &labels);
    let dcls = Tensor::from_vec(1, m, m, dcls)?;
    Ok((cls_loss + reg_loss, net.regression_backward(&cache, &dcls, &dltrb)))
}

/// Fits the similarity encoder and regression head on synthetic pairs.
/// This replaces large-scale first-stage tracker training.
pub fn pretrain_regression(
    net: &mut SegNet,
    source: &PairSource,
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut sgd = Sgd::new(net, 0.9, is_stage_one);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let sampling = PairSampling::default();
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let pairs = (0..batch)
            .map(|_| sample_pair(source, net.config(), &sampling, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let shared: &SegNet = net;
        let results = pairs
            .par_iter()
            .map(|p| regression_loss(shared, p))
            .collect::<Result<Vec<_>>>()?;
        let mut grads = net.params().zero_grads();
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l / batch as f64;
            grads.add_assign(g);
        }
        grads.scale(1.0 / batch as f64);
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("regression loss {loss}"),
            });
        }
        // cosine decay keeps the last steps gentle
        let u = step as f64 / steps as f64;
        sgd.step(net, &grads, lr * 0.5 * (1.0 + (std::f64::consts::PI * u).cos()));
        losses.push(loss);
    }
    Ok(losses)
}
