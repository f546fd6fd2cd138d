//! Joint segmentation network.
//!
//! Three encoders feed one shared high-level feature space:
//!
//! * the saliency encoder sees a tight crop around the target and also
//!   provides the decoder skips at strides 4, 8 and 16;
//! * the similarity encoder embeds a wider search crop and the first-frame
//!   template, correlates them depthwise, and drives a dense box regression
//!   head;
//! * the global encoder embeds background-filtered target images (the
//!   running average of those embeddings is maintained by the tracker).
//!
//! The three stride-16 features are summed and decoded with bilinear
//! upsampling and skip concatenation into probability maps at strides 16, 8
//! and 4. All arithmetic is `f64` and forward passes are deterministic.

mod checkpoint;
mod layers;
mod params;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::grid::Grid;
use crate::maskops::ProbabilityMap;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use params::{Grads, Param, ParamStore};
pub(crate) use layers::bce_with_logits;

use layers::{
    concat, conv_backward, conv_forward, conv_out_size, relu_backward, relu_inplace, resize,
    resize_backward, sigmoid, split, xcorr, xcorr_backward, ConvCache, ConvShape,
};

/// Parameter-name prefixes trained in the first stage and frozen afterwards.
pub const STAGE_ONE_PREFIXES: [&str; 2] = ["similarity.", "regression."];

/// Architecture and input geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub saliency_input: usize,
    pub similarity_input: usize,
    pub template_input: usize,
    pub global_input: usize,
    /// Output channels of the four stride-2 stages (strides 2, 4, 8, 16).
    pub saliency_widths: Vec<usize>,
    /// Output channels of the three stride-2 stages (strides 2, 4, 8).
    pub similarity_widths: Vec<usize>,
    /// Output channels of the four stride-2 stages of the global encoder.
    pub global_widths: Vec<usize>,
    /// Residual blocks after each downsampling convolution.
    pub blocks_per_stage: usize,
    pub fusion_channels: usize,
    /// Decoder channels at strides 16, 8 and 4.
    pub decoder_widths: Vec<usize>,
    pub use_saliency: bool,
    pub use_correlation: bool,
    pub use_global: bool,
}

impl NetworkConfig {
    /// Input sizes of the reference design with wide channel counts.
    pub fn full() -> Self {
        Self {
            saliency_input: 257,
            similarity_input: 303,
            template_input: 127,
            global_input: 129,
            saliency_widths: vec![64, 128, 256, 512],
            similarity_widths: vec![96, 256, 256],
            global_widths: vec![64, 128, 256, 512],
            blocks_per_stage: 1,
            fusion_channels: 256,
            decoder_widths: vec![128, 64, 32],
            use_saliency: true,
            use_correlation: true,
            use_global: true,
        }
    }

    /// Small network for laptop-scale training on synthetic data.
    pub fn desk() -> Self {
        Self {
            saliency_input: 65,
            similarity_input: 97,
            template_input: 33,
            global_input: 33,
            saliency_widths: vec![8, 12, 16, 16],
            similarity_widths: vec![8, 12, 16],
            global_widths: vec![4, 8, 8, 16],
            blocks_per_stage: 1,
            fusion_channels: 16,
            decoder_widths: vec![16, 12, 8],
            use_saliency: true,
            use_correlation: true,
            use_global: true,
        }
    }

    /// Tiny network for gradient checks.
    pub fn toy() -> Self {
        Self {
            saliency_input: 33,
            similarity_input: 47,
            template_input: 31,
            global_input: 17,
            saliency_widths: vec![4, 6, 8, 8],
            similarity_widths: vec![4, 6, 8],
            global_widths: vec![4, 4, 6, 8],
            blocks_per_stage: 1,
            fusion_channels: 8,
            decoder_widths: vec![8, 6, 4],
            use_saliency: true,
            use_correlation: true,
            use_global: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::InvalidConfig(format!("unknown network preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.saliency_widths.len() != 4 || self.global_widths.len() != 4 {
            return bad("saliency_widths and global_widths need 4 stages");
        }
        if self.similarity_widths.len() != 3 || self.decoder_widths.len() != 3 {
            return bad("similarity_widths and decoder_widths need 3 entries");
        }
        let widths = self
            .saliency_widths
            .iter()
            .chain(&self.similarity_widths)
            .chain(&self.global_widths)
            .chain(&self.decoder_widths);
        if widths.chain([&self.fusion_channels]).any(|&w| w == 0) {
            return bad("channel counts must be positive");
        }
        if self.saliency_input < 17 || self.global_input < 9 || self.template_input < 15 {
            return bad("inputs too small for the stride-2 stages");
        }
        if self.template_embedding_size() == 0 || self.similarity_embedding_size() < self.template_embedding_size() {
            return bad("similarity_input must exceed template_input");
        }
        Ok(())
    }

    fn pyramid(n: usize, stages: usize, pad: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(stages);
        let mut s = n;
        for _ in 0..stages {
            if s + 2 * pad < 3 {
                sizes.push(0);
                continue;
            }
            s = conv_out_size(s, 3, 2, pad);
            sizes.push(s);
        }
        sizes
    }

    /// Saliency feature sizes at strides 2, 4, 8 and 16.
    pub fn saliency_sizes(&self) -> Vec<usize> {
        Self::pyramid(self.saliency_input, 4, 1)
    }

    pub fn stride4_size(&self) -> usize {
        self.saliency_sizes()[1]
    }

    pub fn stride8_size(&self) -> usize {
        self.saliency_sizes()[2]
    }

    pub fn fusion_size(&self) -> usize {
        self.saliency_sizes()[3]
    }

    pub fn global_feature_size(&self) -> usize {
        Self::pyramid(self.global_input, 4, 1)[3]
    }

    pub fn similarity_embedding_size(&self) -> usize {
        Self::pyramid(self.similarity_input, 3, 0)[2]
    }

    pub fn template_embedding_size(&self) -> usize {
        Self::pyramid(self.template_input, 3, 0)[2]
    }

    pub fn correlation_size(&self) -> usize {
        self.similarity_embedding_size() - self.template_embedding_size() + 1
    }

    /// Search-crop pixel position of correlation cell `d`.
    pub fn correlation_position(&self, d: usize) -> f64 {
        8.0 * (d as f64 + (self.template_embedding_size() as f64 - 1.0) / 2.0) + 7.0
    }

    /// Distance that a zero regression output decodes to.
    pub fn regression_base(&self) -> f64 {
        self.similarity_input as f64 / 8.0
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: usize,
    b: usize,
    shape: ConvShape,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, shape: ConvShape, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (shape.cin * shape.k * shape.k) as f64;
        let w = store.push_uniform(
            format!("{name}.weight"),
            vec![shape.cout, shape.cin, shape.k, shape.k],
            (6.0 / fan_in).sqrt(),
            rng,
        );
        let b = store.push(format!("{name}.bias"), vec![shape.cout], vec![0.0; shape.cout]);
        Self { w, b, shape }
    }

    fn k3(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(store, name, ConvShape { cin, cout, k: 3, stride, pad: 1 }, rng)
    }

    fn k1(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(store, name, ConvShape { cin, cout, k: 1, stride: 1, pad: 0 }, rng)
    }

    fn forward(&self, p: &ParamStore, x: &Tensor, keep: bool) -> (Tensor, ConvCache) {
        conv_forward(x, p.data(self.w), p.data(self.b), &self.shape, keep)
    }

    fn backward(&self, p: &ParamStore, dy: &Tensor, cache: &ConvCache, g: &mut Grads) -> Tensor {
        let (dw, db) = two_mut(&mut g.0, self.w, self.b);
        conv_backward(dy, cache, p.data(self.w), &self.shape, dw, db)
    }
}

fn two_mut(v: &mut [Vec<f64>], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}

struct Block {
    c1: Conv,
    c2: Conv,
}

struct BlockCache {
    c1: ConvCache,
    h1: Tensor,
    c2: ConvCache,
    out: Tensor,
}

struct Stage {
    down: Conv,
    blocks: Vec<Block>,
}

struct StageCache {
    down: ConvCache,
    down_out: Tensor,
    blocks: Vec<BlockCache>,
}

/// Stack of stride-2 stages with residual blocks.
struct Encoder {
    stages: Vec<Stage>,
}

struct EncoderCache {
    stages: Vec<StageCache>,
}

impl Encoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        widths: &[usize],
        blocks: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut stages = Vec::new();
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            let shape = ConvShape { cin: c, cout: w, k: 3, stride: 2, pad };
            let down = Conv::new(store, &format!("{name}.stage{i}.down"), shape, rng);
            let blocks = (0..blocks)
                .map(|j| Block {
                    c1: Conv::k3(store, &format!("{name}.stage{i}.block{j}.conv1"), w, w, 1, rng),
                    c2: Conv::k3(store, &format!("{name}.stage{i}.block{j}.conv2"), w, w, 1, rng),
                })
                .collect();
            stages.push(Stage { down, blocks });
            c = w;
        }
        Self { stages }
    }

    /// Returns every stage output.
    fn forward(&self, p: &ParamStore, x: &Tensor, keep: bool) -> (Vec<Tensor>, EncoderCache) {
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut caches = Vec::new();
        let mut h = x.clone();
        for st in &self.stages {
            let (mut y, dc) = st.down.forward(p, &h, keep);
            relu_inplace(&mut y);
            let down_out = if keep { y.clone() } else { Tensor::zeros(0, 0, 0) };
            let mut bcs = Vec::new();
            for b in &st.blocks {
                let (mut h1, c1) = b.c1.forward(p, &y, keep);
                relu_inplace(&mut h1);
                let (mut z, c2) = b.c2.forward(p, &h1, keep);
                for (zv, &yv) in z.data.iter_mut().zip(&y.data) {
                    *zv += yv;
                }
                relu_inplace(&mut z);
                if keep {
                    bcs.push(BlockCache { c1, h1, c2, out: z.clone() });
                }
                y = z;
            }
            outs.push(y.clone());
            if keep {
                caches.push(StageCache { down: dc, down_out, blocks: bcs });
            }
            h = y;
        }
        (outs, EncoderCache { stages: caches })
    }

    /// `d_outs[i]` is the gradient arriving at stage `i`'s output.
    fn backward(&self, p: &ParamStore, cache: &EncoderCache, mut d_outs: Vec<Option<Tensor>>, g: &mut Grads) {
        let mut carry: Option<Tensor> = None;
        for (i, st) in self.stages.iter().enumerate().rev() {
            let mut d = match (carry.take(), d_outs[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b).expect("stage gradient shape");
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            let sc = &cache.stages[i];
            for (b, bc) in st.blocks.iter().zip(&sc.blocks).rev() {
                relu_backward(&mut d, &bc.out);
                let mut dh1 = b.c2.backward(p, &d, &bc.c2, g);
                relu_backward(&mut dh1, &bc.h1);
                let dx = b.c1.backward(p, &dh1, &bc.c1, g);
                d.add_assign(&dx).expect("block gradient shape");
            }
            relu_backward(&mut d, &sc.down_out);
            let dx = st.down.backward(p, &d, &sc.down, g);
            if i > 0 {
                carry = Some(dx);
            }
        }
    }
}

/// Cached first-frame template embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Template(pub Tensor);

/// Where the template branch gets its embedding.
#[derive(Debug, Clone, Copy)]
pub enum TemplateInput<'a> {
    Image(&'a Tensor),
    Embedded(&'a Template),
}

/// Where the global branch gets its feature.
#[derive(Debug, Clone, Copy)]
pub enum GlobalInput<'a> {
    /// Background-filtered image at `global_input²`, encoded in this pass.
    Image(&'a Tensor),
    /// Precomputed feature at `fusion_channels × g × g`.
    Feature(&'a Tensor),
    None,
}

pub struct SegInputs<'a> {
    pub saliency: &'a Tensor,
    pub search: &'a Tensor,
    pub template: TemplateInput<'a>,
    pub global: GlobalInput<'a>,
}

/// Probability maps at strides 4, 8 and 16 and the regressed box.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput {
    pub prob_stride4: ProbabilityMap,
    pub aux_stride8: ProbabilityMap,
    pub aux_stride16: ProbabilityMap,
    /// Box in similarity-crop pixel coordinates.
    pub reg_box_crop: Box,
    pub reg_score: f64,
}

/// Raw regression head outputs over the correlation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionMaps {
    /// Classification logits, `1 × m × m`.
    pub cls: Tensor,
    /// Log-distances to the left, top, right and bottom edges, `4 × m × m`.
    pub ltrb: Tensor,
}

struct SimilarityCache {
    search: EncoderCache,
    template: Option<EncoderCache>,
    search_emb: Tensor,
    template_emb: Tensor,
}

struct RegressionCache {
    tower: ConvCache,
    tower_out: Tensor,
    head: ConvCache,
}

struct GlobalCache {
    enc: EncoderCache,
    proj: ConvCache,
    size: usize,
}

struct DecoderCache {
    c16: ConvCache,
    d16: Tensor,
    h16: ConvCache,
    c8: ConvCache,
    d8: Tensor,
    h8: ConvCache,
    c4: ConvCache,
    d4: Tensor,
    h4: ConvCache,
}

/// Everything the backward pass needs from a training forward pass.
pub struct ForwardCache {
    sal: EncoderCache,
    sal_proj: ConvCache,
    sim: SimilarityCache,
    corr_proj: ConvCache,
    corr_size: usize,
    global: Option<GlobalCache>,
    dec: DecoderCache,
    /// Logits at strides 4, 8, 16.
    pub logits: [Tensor; 3],
}

pub struct SegNet {
    config: NetworkConfig,
    params: ParamStore,
    saliency: Encoder,
    saliency_proj: Conv,
    similarity: Encoder,
    correlation_proj: Conv,
    reg_tower: Conv,
    reg_head: Conv,
    global: Encoder,
    global_proj: Conv,
    dec16: Conv,
    head16: Conv,
    dec8: Conv,
    head8: Conv,
    dec4: Conv,
    head4: Conv,
}

impl std::fmt::Debug for SegNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SegNet")
            .field("config", &self.config)
            .field("scalars", &self.params.scalar_count())
            .finish()
    }
}

impl SegNet {
    /// Randomly initialised network.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::default();
        let c = &config;
        let n = c.blocks_per_stage;
        let f = c.fusion_channels;
        let saliency = Encoder::new(&mut p, "saliency", 3, &c.saliency_widths, n, 1, &mut rng);
        let saliency_proj = Conv::k1(&mut p, "saliency.proj", c.saliency_widths[3], f, &mut rng);
        // unpadded and without residual blocks: translation equivariant
        let similarity = Encoder::new(&mut p, "similarity", 3, &c.similarity_widths, 0, 0, &mut rng);
        let emb = c.similarity_widths[2];
        let correlation_proj = Conv::k1(&mut p, "correlation.proj", emb, f, &mut rng);
        let reg_tower = Conv::k3(&mut p, "regression.tower", emb, emb, 1, &mut rng);
        let reg_head = Conv::k1(&mut p, "regression.head", emb, 5, &mut rng);
        let global = Encoder::new(&mut p, "global", 3, &c.global_widths, n, 1, &mut rng);
        let global_proj = Conv::k1(&mut p, "global.proj", c.global_widths[3], f, &mut rng);
        let [d16, d8, d4] = [c.decoder_widths[0], c.decoder_widths[1], c.decoder_widths[2]];
        let dec16 = Conv::k3(&mut p, "decoder.s16", f, d16, 1, &mut rng);
        let head16 = Conv::k1(&mut p, "decoder.head16", d16, 1, &mut rng);
        let dec8 = Conv::k3(&mut p, "decoder.s8", d16 + c.saliency_widths[2], d8, 1, &mut rng);
        let head8 = Conv::k1(&mut p, "decoder.head8", d8, 1, &mut rng);
        let dec4 = Conv::k3(&mut p, "decoder.s4", d8 + c.saliency_widths[1], d4, 1, &mut rng);
        let head4 = Conv::k1(&mut p, "decoder.head4", d4, 1, &mut rng);
        Ok(Self {
            config,
            params: p,
            saliency,
            saliency_proj,
            similarity,
            correlation_proj,
            reg_tower,
            reg_head,
            global,
            global_proj,
            dec16,
            head16,
            dec8,
            head8,
            dec4,
            head4,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Replaces the fusion ablation switches without touching weights.
    pub fn set_fusion_inputs(&mut self, saliency: bool, correlation: bool, global: bool) {
        self.config.use_saliency = saliency;
        self.config.use_correlation = correlation;
        self.config.use_global = global;
    }

    fn check_image(t: &Tensor, size: usize, what: &'static str) -> Result<()> {
        if t.shape() != (3, size, size) {
            return Err(Error::InvalidParameter {
                name: what,
                reason: format!("expected 3x{size}x{size}, got {:?}", t.shape()),
            });
        }
        Ok(())
    }

    pub fn embed_template(&self, template: &Tensor) -> Result<Template> {
        Self::check_image(template, self.config.template_input, "template")?;
        let (mut outs, _) = self.similarity.forward(&self.params, template, false);
        Ok(Template(outs.pop().expect("similarity stages")))
    }

    /// Global-branch feature of a background-filtered image, at
    /// `fusion_channels × g × g`.
    pub fn global_feature(&self, filtered: &Tensor) -> Result<Tensor> {
        Self::check_image(filtered, self.config.global_input, "global image")?;
        let (outs, _) = self.global.forward(&self.params, filtered, false);
        let (g, _) = self.global_proj.forward(&self.params, &outs[3], false);
        Ok(g)
    }

    pub fn global_feature_shape(&self) -> (usize, usize, usize) {
        let g = self.config.global_feature_size();
        (self.config.fusion_channels, g, g)
    }

    /// Inference forward pass.
    pub fn infer(&self, inputs: &SegInputs<'_>) -> Result<SegOutput> {
        Ok(self.run(inputs, false)?.0)
    }

    /// Training forward pass; the cache feeds [`SegNet::backward`].
    pub fn forward(&self, inputs: &SegInputs<'_>) -> Result<(SegOutput, ForwardCache)> {
        let (out, cache) = self.run(inputs, true)?;
        Ok((out, cache.expect("training cache")))
    }

    fn similarity_forward(
        &self,
        search: &Tensor,
        template: TemplateInput<'_>,
        keep: bool,
    ) -> Result<(Tensor, SimilarityCache)> {
        let c = &self.config;
        Self::check_image(search, c.similarity_input, "search crop")?;
        let (template_emb, template_cache) = match template {
            TemplateInput::Image(t) => {
                Self::check_image(t, c.template_input, "template")?;
                let (mut outs, cache) = self.similarity.forward(&self.params, t, keep);
                (outs.pop().expect("stages"), keep.then_some(cache))
            }
            TemplateInput::Embedded(t) => {
                let te = c.template_embedding_size();
                t.0.ensure_shape((c.similarity_widths[2], te, te))?;
                (t.0.clone(), None)
            }
        };
        let (mut outs, search_cache) = self.similarity.forward(&self.params, search, keep);
        let search_emb = outs.pop().expect("stages");
        let corr = xcorr(&search_emb, &template_emb);
        Ok((
            corr,
            SimilarityCache {
                search: search_cache,
                template: template_cache,
                search_emb,
                template_emb,
            },
        ))
    }

    /// Depthwise correlation of search and template embeddings.
    pub fn correlation(&self, search: &Tensor, template: TemplateInput<'_>) -> Result<Tensor> {
        Ok(self.similarity_forward(search, template, false)?.0)
    }

    fn regression_forward(&self, corr: &Tensor, keep: bool) -> (RegressionMaps, RegressionCache) {
        let (mut t, tower) = self.reg_tower.forward(&self.params, corr, keep);
        relu_inplace(&mut t);
        let (h, head) = self.reg_head.forward(&self.params, &t, keep);
        let (cls, ltrb) = split(&h, 1);
        (
            RegressionMaps { cls, ltrb },
            RegressionCache {
                tower,
                tower_out: t,
                head,
            },
        )
    }

    /// Decodes the best-scoring box in search-crop coordinates, clipped to
    /// the crop.
    pub fn decode_regression(&self, maps: &RegressionMaps) -> (Box, f64) {
        let m = maps.cls.w;
        let (best, &score) = maps
            .cls
            .data
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        let (dy, dx) = (best / m, best % m);
        let x = self.config.correlation_position(dx);
        let y = self.config.correlation_position(dy);
        let base = self.config.regression_base();
        let n = m * m;
        let dist = |k: usize| base * maps.ltrb.data[k * n + best].clamp(-8.0, 8.0).exp();
        let hi = (self.config.similarity_input - 1) as f64;
        let x0 = (x - dist(0)).clamp(0.0, hi);
        let y0 = (y - dist(1)).clamp(0.0, hi);
        let x1 = (x + dist(2)).clamp(0.0, hi);
        let y1 = (y + dist(3)).clamp(0.0, hi);
        let b = Box::from_corners(x0, y0, x1.max(x0 + 1e-3), y1.max(y0 + 1e-3)).expect("positive extent");
        (b, sigmoid(score))
    }

    fn run(&self, inputs: &SegInputs<'_>, keep: bool) -> Result<(SegOutput, Option<ForwardCache>)> {
        let c = &self.config;
        let p = &self.params;
        Self::check_image(inputs.saliency, c.saliency_input, "saliency crop")?;
        let fs = c.fusion_size();

        let (sal_outs, sal_cache) = self.saliency.forward(p, inputs.saliency, keep);
        let (high, sal_proj) = self.saliency_proj.forward(p, &sal_outs[3], keep);

        let (corr, sim_cache) = self.similarity_forward(inputs.search, inputs.template, keep)?;
        let (reg, _) = self.regression_forward(&corr, false);
        let (reg_box_crop, reg_score) = self.decode_regression(&reg);
        let (corr_feat, corr_proj) = self.correlation_proj.forward(p, &corr, keep);
        let corr_size = corr_feat.h;
        let corr_feat = resize(&corr_feat, fs, fs);

        let (global_feat, global_cache) = match inputs.global {
            GlobalInput::Image(img) => {
                Self::check_image(img, c.global_input, "global image")?;
                let (outs, enc) = self.global.forward(p, img, keep);
                let (g, proj) = self.global_proj.forward(p, &outs[3], keep);
                let size = g.h;
                (Some(resize(&g, fs, fs)), Some(GlobalCache { enc, proj, size }))
            }
            GlobalInput::Feature(g) => {
                if g.c != c.fusion_channels {
                    return Err(Error::shape(c.fusion_channels, g.c));
                }
                (Some(resize(g, fs, fs)), None)
            }
            GlobalInput::None => (None, None),
        };

        let mut fused = Tensor::zeros(c.fusion_channels, fs, fs);
        if c.use_saliency {
            fused.add_assign(&high)?;
        }
        if c.use_correlation {
            fused.add_assign(&corr_feat)?;
        }
        if c.use_global {
            if let Some(g) = &global_feat {
                fused.add_assign(g)?;
            }
        }

        // decoder
        let (mut d16, c16) = self.dec16.forward(p, &fused, keep);
        relu_inplace(&mut d16);
        let (l16, h16) = self.head16.forward(p, &d16, keep);
        let skip8 = &sal_outs[2];
        let u8 = resize(&d16, skip8.h, skip8.w);
        let (mut d8, c8) = self.dec8.forward(p, &concat(&u8, skip8), keep);
        relu_inplace(&mut d8);
        let (l8, h8) = self.head8.forward(p, &d8, keep);
        let skip4 = &sal_outs[1];
        let u4 = resize(&d8, skip4.h, skip4.w);
        let (mut d4, c4) = self.dec4.forward(p, &concat(&u4, skip4), keep);
        relu_inplace(&mut d4);
        let (l4, h4) = self.head4.forward(p, &d4, keep);

        let out = SegOutput {
            prob_stride4: logits_to_map(&l4),
            aux_stride8: logits_to_map(&l8),
            aux_stride16: logits_to_map(&l16),
            reg_box_crop,
            reg_score,
        };
        let cache = keep.then_some(ForwardCache {
            sal: sal_cache,
            sal_proj,
            sim: sim_cache,
            corr_proj,
            corr_size,
            global: global_cache,
            dec: DecoderCache {
                c16,
                d16,
                h16,
                c8,
                d8,
                h8,
                c4,
                d4,
                h4,
            },
            logits: [l4, l8, l16],
        });
        Ok((out, cache))
    }

    /// Gradients of a loss whose logit gradients at strides 4, 8 and 16 are
    /// given.
    pub fn backward(&self, cache: &ForwardCache, dlogits: [&Tensor; 3]) -> Grads {
        let c = &self.config;
        let p = &self.params;
        let mut g = p.zero_grads();
        let dc = &cache.dec;
        let [dl4, dl8, dl16] = dlogits;

        let mut dd4 = self.head4.backward(p, dl4, &dc.h4, &mut g);
        relu_backward(&mut dd4, &dc.d4);
        let dcat4 = self.dec4.backward(p, &dd4, &dc.c4, &mut g);
        let (du4, dskip4) = split(&dcat4, c.decoder_widths[1]);

        let mut dd8 = resize_backward(&du4, dc.d8.h, dc.d8.w);
        dd8.add_assign(&self.head8.backward(p, dl8, &dc.h8, &mut g)).expect("d8");
        relu_backward(&mut dd8, &dc.d8);
        let dcat8 = self.dec8.backward(p, &dd8, &dc.c8, &mut g);
        let (du8, dskip8) = split(&dcat8, c.decoder_widths[0]);

        let mut dd16 = resize_backward(&du8, dc.d16.h, dc.d16.w);
        dd16.add_assign(&self.head16.backward(p, dl16, &dc.h16, &mut g)).expect("d16");
        relu_backward(&mut dd16, &dc.d16);
        let dfused = self.dec16.backward(p, &dd16, &dc.c16, &mut g);

        // saliency branch
        let d_high = if c.use_saliency {
            Some(self.saliency_proj.backward(p, &dfused, &cache.sal_proj, &mut g))
        } else {
            None
        };
        self.saliency
            .backward(p, &cache.sal, vec![None, Some(dskip4), Some(dskip8), d_high], &mut g);

        // similarity branch
        if c.use_correlation {
            let d_corr_feat = resize_backward(&dfused, cache.corr_size, cache.corr_size);
            let d_corr = self.correlation_proj.backward(p, &d_corr_feat, &cache.corr_proj, &mut g);
            let sim = &cache.sim;
            let (d_search, d_template) = xcorr_backward(&d_corr, &sim.search_emb, &sim.template_emb);
            self.similarity
                .backward(p, &sim.search, vec![None, None, Some(d_search)], &mut g);
            if let Some(tc) = &sim.template {
                self.similarity.backward(p, tc, vec![None, None, Some(d_template)], &mut g);
            }
        }

        // global branch
        if c.use_global {
            if let Some(gc) = &cache.global {
                let dg = resize_backward(&dfused, gc.size, gc.size);
                let d_enc = self.global_proj.backward(p, &dg, &gc.proj, &mut g);
                self.global.backward(p, &gc.enc, vec![None, None, None, Some(d_enc)], &mut g);
            }
        }
        g
    }

    /// Regression maps for a (search, template) pair, with a cache for
    /// [`SegNet::regression_backward`].
    pub fn regression_forward_train(&self, search: &Tensor, template: &Tensor) -> Result<(RegressionMaps, RegressionTrainCache)> {
        let (corr, sim) = self.similarity_forward(search, TemplateInput::Image(template), true)?;
        let (maps, reg) = self.regression_forward(&corr, true);
        Ok((maps, RegressionTrainCache { sim, reg }))
    }

    pub fn regression_backward(&self, cache: &RegressionTrainCache, dcls: &Tensor, dltrb: &Tensor) -> Grads {
        let p = &self.params;
        let mut g = p.zero_grads();
        let dh = concat(dcls, dltrb);
        let mut dt = self.reg_head.backward(p, &dh, &cache.reg.head, &mut g);
        relu_backward(&mut dt, &cache.reg.tower_out);
        let d_corr = self.reg_tower.backward(p, &dt, &cache.reg.tower, &mut g);
        let sim = &cache.sim;
        let (d_search, d_template) = xcorr_backward(&d_corr, &sim.search_emb, &sim.template_emb);
        self.similarity
            .backward(p, &sim.search, vec![None, None, Some(d_search)], &mut g);
        if let Some(tc) = &sim.template {
            self.similarity.backward(p, tc, vec![None, None, Some(d_template)], &mut g);
        }
        g
    }

    pub(crate) fn from_parts(config: NetworkConfig, params: Vec<Param>) -> Result<Self> {
        let mut net = Self::new(config, 0)?;
        if net.params.len() != params.len() {
            return Err(Error::InvalidCheckpoint(format!(
                "expected {} tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for (i, loaded) in params.into_iter().enumerate() {
            let slot = net.params.get_mut(i);
            if slot.name != loaded.name || slot.shape != loaded.shape {
                return Err(Error::InvalidCheckpoint(format!(
                    "tensor {i}: expected {} {:?}, found {} {:?}",
                    slot.name, slot.shape, loaded.name, loaded.shape
                )));
            }
            *slot = loaded;
        }
        Ok(net)
    }
}

pub struct RegressionTrainCache {
    sim: SimilarityCache,
    reg: RegressionCache,
}

fn logits_to_map(l: &Tensor) -> ProbabilityMap {
    let data = l.data.iter().map(|&z| sigmoid(z)).collect();
    ProbabilityMap::from_grid_clamped(Grid::from_vec(l.w, l.h, data).expect("logit plane"))
}

/// Elementwise sum of the three fusion inputs.
pub fn fuse(saliency_high: &Tensor, correlated: &Tensor, global: &Tensor) -> Result<Tensor> {
    correlated.ensure_shape(saliency_high.shape())?;
    global.ensure_shape(saliency_high.shape())?;
    let mut out = saliency_high.clone();
    out.add_assign(correlated)?;
    out.add_assign(global)?;
    Ok(out)
}

/// Binary cross-entropy of each head plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub stride4: f64,
    pub stride8: f64,
    pub stride16: f64,
}

/// Targets in `{0, 1}` at strides 4, 8 and 16.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub stride4: Grid<f64>,
    pub stride8: Grid<f64>,
    pub stride16: Grid<f64>,
}

impl LossTargets {
    /// Area-pools a crop-resolution mask to every head size and thresholds
    /// at 0.5.
    pub fn from_mask(mask: &Grid<f64>, config: &NetworkConfig) -> Self {
        let s = config.saliency_sizes();
        let at = |n: usize| area_downsample(mask, n, n).map(|&v| if v >= 0.5 { 1.0 } else { 0.0 });
        Self {
            stride4: at(s[1]),
            stride8: at(s[2]),
            stride16: at(s[3]),
        }
    }
}

/// Box-filter resampling: each output cell averages the input area it covers.
pub fn area_downsample(g: &Grid<f64>, out_w: usize, out_h: usize) -> Grid<f64> {
    let (w, h) = g.shape();
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let span = |o: usize, s: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * s, (o as f64 + 1.0) * s);
        (a.floor() as usize..(b.ceil() as usize).min(n))
            .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0)))
            .filter(|(_, f)| *f > 0.0)
            .collect()
    };
    let xs: Vec<_> = (0..out_w).map(|o| span(o, sx, w)).collect();
    let ys: Vec<_> = (0..out_h).map(|o| span(o, sy, h)).collect();
    Grid::from_fn(out_w, out_h, |ox, oy| {
        let mut acc = 0.0;
        let mut area = 0.0;
        for &(y, fy) in &ys[oy] {
            for &(x, fx) in &xs[ox] {
                acc += g.get(x, y) * fx * fy;
                area += fx * fy;
            }
        }
        acc / area
    })
}

pub const AUX_WEIGHT_STRIDE8: f64 = 0.5;
pub const AUX_WEIGHT_STRIDE16: f64 = 0.3;

fn bce_prob(p: &ProbabilityMap, y: &Grid<f64>) -> Result<f64> {
    p.ensure_same_shape(y)?;
    let eps = 1e-12;
    let n = p.len() as f64;
    Ok(p.as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n)
}

/// `CE(stride 4) + w8 CE(stride 8) + w16 CE(stride 16)` from probabilities.
pub fn loss(out: &SegOutput, targets: &LossTargets, aux_weights: (f64, f64)) -> Result<LossBreakdown> {
    let stride4 = bce_prob(&out.prob_stride4, &targets.stride4)?;
    let stride8 = bce_prob(&out.aux_stride8, &targets.stride8)?;
    let stride16 = bce_prob(&out.aux_stride16, &targets.stride16)?;
    Ok(LossBreakdown {
        total: stride4 + aux_weights.0 * stride8 + aux_weights.1 * stride16,
        stride4,
        stride8,
        stride16,
    })
}

/// Same loss computed from the cached logits, with logit gradients.
pub fn loss_with_grad(
    cache: &ForwardCache,
    targets: &LossTargets,
    aux_weights: (f64, f64),
) -> Result<(LossBreakdown, [Tensor; 3])> {
    let heads = [&targets.stride4, &targets.stride8, &targets.stride16];
    let weights = [1.0, aux_weights.0, aux_weights.1];
    let mut parts = [0.0; 3];
    let mut grads: Vec<Tensor> = Vec::with_capacity(3);
    for i in 0..3 {
        let l = &cache.logits[i];
        if (l.w, l.h) != heads[i].shape() {
            return Err(Error::shape((l.w, l.h), heads[i].shape()));
        }
        let (v, mut g) = bce_with_logits(&l.data, heads[i].as_slice());
        parts[i] = v;
        for x in &mut g {
            *x *= weights[i];
        }
        grads.push(Tensor::from_vec(1, l.h, l.w, g)?);
    }
    let g16 = grads.pop().expect("3");
    let g8 = grads.pop().expect("2");
    let g4 = grads.pop().expect("1");
    Ok((
        LossBreakdown {
            total: parts[0] + weights[1] * parts[1] + weights[2] * parts[2],
            stride4: parts[0],
            stride8: parts[1],
            stride16: parts[2],
        },
        [g4, g8, g16],
    ))
}

/// Soft IoU `sum(p g) / sum(p + g - p g)`.
pub fn soft_iou(p: &Grid<f64>, g: &Grid<f64>) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
        inter += a * b;
        union += a + b - a * b;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}
