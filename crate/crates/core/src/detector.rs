//! A small two-stage detector: strided convolutional backbone, four-level
//! top-down pyramid, anchor-based proposal stage, RoIAlign region features
//! and a classification/regression head.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_rows, Graph, RoiRef, Var};
use crate::boxes::{self, area, clip, decode, encode, iou, nms_until, Bbox, CodeWeights};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::synthdata::{BoxSet, ImageTensor};
use crate::tensor::{Real, Tensor};

pub const NUM_LEVELS: usize = 4;
pub const STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];
pub const MIN_INPUT_SIDE: usize = 16;
pub const RPN_CODE_WEIGHTS: CodeWeights = [1.0, 1.0, 1.0, 1.0];
pub const HEAD_CODE_WEIGHTS: CodeWeights = [10.0, 10.0, 5.0, 5.0];

/// Per-channel input normalisation applied when batching.
const INPUT_MEAN: f32 = 0.45;
const INPUT_STD: f32 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalParams {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
    /// Candidates kept by score before suppression.
    pub pre_nms_top_n: usize,
    /// Boxes narrower or shorter than this (pixels) are dropped.
    pub min_size: f64,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.7, max_per_image: 1000, pre_nms_top_n: 2000, min_size: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; NUM_LEVELS],
    /// Adds a stride-1 3x3 convolution after each downsampling convolution.
    pub stage_extra_conv: bool,
    pub pyramid_channels: usize,
    pub rpn_hidden: usize,
    pub anchor_sizes: [f64; NUM_LEVELS],
    pub aspect_ratios: Vec<f64>,
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub fc_hidden: usize,
    pub region_dim: usize,
    pub proposals: ProposalParams,
    /// Proposals per image offered to head sampling during training.
    pub train_proposals_per_image: usize,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f64,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            stem_channels: 16,
            stage_channels: [16, 32, 64, 128],
            stage_extra_conv: true,
            pyramid_channels: 64,
            rpn_hidden: 64,
            anchor_sizes: [16.0, 32.0, 64.0, 96.0],
            aspect_ratios: vec![0.5, 1.0, 2.0],
            roi_size: 7,
            roi_sampling: 2,
            fc_hidden: 256,
            region_dim: 1024,
            proposals: ProposalParams::default(),
            train_proposals_per_image: 300,
            rpn_batch_per_image: 128,
            rpn_positive_fraction: 0.5,
            roi_batch_per_image: 32,
            roi_positive_fraction: 0.25,
            positive_iou: 0.5,
            negative_iou: 0.3,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_classes == 0 {
            problems.push("num_classes must be at least 1".to_string());
        }
        if self.stem_channels == 0 || self.stage_channels.contains(&0) {
            problems.push("channel counts must be positive".to_string());
        }
        if self.pyramid_channels == 0 || self.rpn_hidden == 0 || self.fc_hidden == 0 || self.region_dim == 0 {
            problems.push("layer widths must be positive".to_string());
        }
        if self.aspect_ratios.is_empty() || self.aspect_ratios.iter().any(|&r| !(r > 0.0)) {
            problems.push("aspect ratios must be a non-empty list of positive values".to_string());
        }
        if self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            problems.push("anchor sizes must be positive".to_string());
        }
        if self.roi_size == 0 || self.roi_sampling == 0 {
            problems.push("roi_size and roi_sampling must be positive".to_string());
        }
        for (name, v) in [("rpn_positive_fraction", self.rpn_positive_fraction), ("roi_positive_fraction", self.roi_positive_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.negative_iou <= self.positive_iou && self.negative_iou >= 0.0 && self.positive_iou <= 1.0) {
            problems.push("need 0 <= negative_iou <= positive_iou <= 1".to_string());
        }
        let p = &self.proposals;
        if !(0.0..1.0).contains(&p.score_threshold) || !(0.0..=1.0).contains(&p.nms_iou) || p.max_per_image == 0 {
            problems.push("proposal parameters out of range".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(problems.join("; ")))
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len()
    }
}

/// Four pyramid maps, finest first, all with the same channel count.
#[derive(Clone, Copy, Debug)]
pub struct PyramidFeatures {
    pub levels: [Var; NUM_LEVELS],
}

/// Raw proposal-stage outputs per level: objectness logits `[N, A, H, W]`
/// and box deltas `[N, 4A, H, W]` (anchor-major channels).
#[derive(Clone, Debug)]
pub struct RpnOutput {
    pub objectness: Vec<Var>,
    pub deltas: Vec<Var>,
}

/// All anchors for one padded input size. Within a level anchors are
/// ordered by (aspect ratio, row, column), matching the RPN tensor layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<Bbox>,
    /// `(height, width)` of each level's map.
    pub level_shapes: [(usize, usize); NUM_LEVELS],
    /// Start of each level in `boxes`, plus the total at the end.
    pub offsets: [usize; NUM_LEVELS + 1],
    pub per_location: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `(level, index within level)` of a flat anchor index.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        let level = (0..NUM_LEVELS).rfind(|&l| self.offsets[l] <= flat).expect("offsets start at 0");
        (level, flat - self.offsets[level])
    }

    fn level_plane(&self, level: usize) -> usize {
        let (h, w) = self.level_shapes[level];
        h * w
    }
}

/// Proposals of one image, sorted by descending objectness.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageProposals {
    pub boxes: Vec<Bbox>,
    pub scores: Vec<f64>,
}

impl ImageProposals {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Proposals with score above `threshold`, at most `cap` of them.
    pub fn filtered(&self, threshold: f64, cap: usize) -> ImageProposals {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.scores[i] > threshold).take(cap).collect();
        ImageProposals {
            boxes: keep.iter().map(|&i| self.boxes[i]).collect(),
            scores: keep.iter().map(|&i| self.scores[i]).collect(),
        }
    }

    pub fn top(&self, n: usize) -> ImageProposals {
        ImageProposals { boxes: self.boxes.iter().take(n).copied().collect(), scores: self.scores.iter().take(n).copied().collect() }
    }
}

/// Proposals flattened over a batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProposalBatch {
    pub boxes: Vec<Bbox>,
    pub objectness: Vec<f64>,
    pub source_image_index: Vec<usize>,
}

impl ProposalBatch {
    pub fn from_images(per_image: &[ImageProposals]) -> Self {
        let mut out = Self::default();
        for (i, p) in per_image.iter().enumerate() {
            out.boxes.extend_from_slice(&p.boxes);
            out.objectness.extend_from_slice(&p.scores);
            out.source_image_index.extend(std::iter::repeat_n(i, p.len()));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn count_for(&self, image: usize) -> usize {
        self.source_image_index.iter().filter(|&&i| i == image).count()
    }
}

/// Region feature rows `[R, region_dim]` for the boxes that survived.
#[derive(Clone, Debug)]
pub struct RegionFeatures {
    pub features: Var,
    /// Indices into the requested box list of the rows of `features`.
    pub kept: Vec<usize>,
    /// Boxes dropped for zero area.
    pub dropped: usize,
}

/// Head outputs: logits `[R, K + 1]` (class 0 is background) and deltas
/// `[R, 4K]`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: Var,
    pub deltas: Var,
}

/// Detection-head values for a set of regions.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionOutput {
    /// Row-major `[R, K + 1]` class probabilities.
    pub scores: Vec<f64>,
    /// Row-major `[R, 4K]` box refinements.
    pub deltas: Vec<f64>,
    pub num_classes: usize,
}

impl DetectionOutput {
    pub fn len(&self) -> usize {
        self.scores.len() / (self.num_classes + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let k = self.num_classes + 1;
        &self.scores[r * k..(r + 1) * k]
    }

    pub fn class_deltas(&self, r: usize, class: usize) -> [f64; 4] {
        let off = r * 4 * self.num_classes + 4 * class;
        self.deltas[off..off + 4].try_into().expect("four deltas")
    }
}

/// One sampled anchor for the proposal-stage loss.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSample {
    pub image: usize,
    pub anchor: usize,
    /// Regression target for positives, `None` for negatives.
    pub target: Option<[f64; 4]>,
}

/// One sampled region for the head loss.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub image: usize,
    pub bbox: Bbox,
    /// 0 for background, `class + 1` otherwise.
    pub label: usize,
    pub target: Option<[f64; 4]>,
}

/// The sampled anchors and regions a detection loss is evaluated on.
/// Fixing a plan makes the loss a deterministic function of the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SamplingPlan {
    pub anchors: Vec<AnchorSample>,
    pub rois: Vec<RoiSample>,
}

/// The four terms of the detection loss.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head_cls: f64,
    pub head_reg: f64,
}

/// Stacks images into a normalised `[N, 3, H, W]` tensor, zero-padding
/// (after normalisation) smaller images at the bottom and right.
pub fn batch_images<T: Real>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::validation("empty image batch"));
    }
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).max().unwrap_or(0);
    if let Some(small) = images.iter().find(|i| i.height() < MIN_INPUT_SIDE || i.width() < MIN_INPUT_SIDE) {
        return Err(Error::validation(format!(
            "image {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
            small.height(),
            small.width()
        )));
    }
    let mut data = vec![T::zero(); images.len() * 3 * h * w];
    for (n, img) in images.iter().enumerate() {
        let (ih, iw) = (img.height(), img.width());
        for c in 0..3 {
            let plane = img.plane(c);
            let dst = &mut data[(n * 3 + c) * h * w..(n * 3 + c + 1) * h * w];
            for y in 0..ih {
                for x in 0..iw {
                    dst[y * w + x] = T::lit(((plane[y * iw + x] - INPUT_MEAN) / INPUT_STD) as f64);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Pyramid level for a box: `clamp(floor(log2(sqrt(area) / 16)), 0, 3)`.
pub fn assign_level(b: &Bbox) -> usize {
    let s = area(b).sqrt();
    if s <= 0.0 {
        return 0;
    }
    (s / 16.0).log2().floor().clamp(0.0, (NUM_LEVELS - 1) as f64) as usize
}

pub fn generate_anchors(cfg: &DetectorConfig, height: usize, width: usize) -> AnchorSet {
    let mut boxes = Vec::new();
    let mut level_shapes = [(0, 0); NUM_LEVELS];
    let mut offsets = [0; NUM_LEVELS + 1];
    for (l, &stride) in STRIDES.iter().enumerate() {
        let (h, w) = (height.div_ceil(stride), width.div_ceil(stride));
        level_shapes[l] = (h, w);
        offsets[l] = boxes.len();
        let size = cfg.anchor_sizes[l];
        let s = stride as f64;
        for &ratio in &cfg.aspect_ratios {
            let (aw, ah) = (size / ratio.sqrt(), size * ratio.sqrt());
            for y in 0..h {
                for x in 0..w {
                    let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                    boxes.push([cx - 0.5 * aw, cy - 0.5 * ah, cx + 0.5 * aw, cy + 0.5 * ah]);
                }
            }
        }
    }
    offsets[NUM_LEVELS] = boxes.len();
    AnchorSet { boxes, level_shapes, offsets, per_location: cfg.anchors_per_location() }
}

/// Score-sorts, suppresses and caps decoded candidates of one image.
/// Candidates must already be clipped. Suppression stops once
/// `max_per_image` boxes are kept, or once `keep_any` are kept and the next
/// score is at or below the threshold; `usize::MAX` keeps the full list.
/// Either way the result covers `top(keep_any)` and `filtered(..)`.
pub fn select_proposals(candidates: &[Bbox], scores: &[f64], params: &ProposalParams, keep_any: usize) -> ImageProposals {
    let mut order: Vec<usize> = (0..candidates.len())
        .filter(|&i| {
            let b = &candidates[i];
            b[2] - b[0] >= params.min_size && b[3] - b[1] >= params.min_size
        })
        .collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order.truncate(params.pre_nms_top_n);
    let b: Vec<Bbox> = order.iter().map(|&i| candidates[i]).collect();
    let s: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let cap = keep_any.max(params.max_per_image);
    let keep = nms_until(&b, &s, params.nms_iou, |kept, score| kept >= cap || (kept >= keep_any && score <= params.score_threshold));
    ImageProposals { boxes: keep.iter().map(|&i| b[i]).collect(), scores: keep.iter().map(|&i| s[i]).collect() }
}

/// Network layout and parameter naming for the detector.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    stem: Conv2d,
    stages: Vec<(Conv2d, Option<Conv2d>)>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_cls: Conv2d,
    rpn_reg: Conv2d,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    bbox: Linear,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Conv2d::new("detector.backbone.stem", 3, cfg.stem_channels, 3, 2);
        let mut stages = Vec::new();
        let mut cin = cfg.stem_channels;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let down = Conv2d::new(format!("detector.backbone.stage{i}.down"), cin, c, 3, 2);
            let extra = cfg.stage_extra_conv.then(|| Conv2d::new(format!("detector.backbone.stage{i}.conv"), c, c, 3, 1));
            stages.push((down, extra));
            cin = c;
        }
        let p = cfg.pyramid_channels;
        let laterals = (0..NUM_LEVELS)
            .map(|i| Conv2d::new(format!("detector.fpn.lateral{i}"), cfg.stage_channels[i], p, 1, 1))
            .collect();
        let smooth = (0..NUM_LEVELS).map(|i| Conv2d::new(format!("detector.fpn.smooth{i}"), p, p, 3, 1)).collect();
        let a = cfg.anchors_per_location();
        let roi_in = p * cfg.roi_size * cfg.roi_size;
        Ok(Self {
            stem,
            stages,
            laterals,
            smooth,
            rpn_conv: Conv2d::new("detector.rpn.conv", p, cfg.rpn_hidden, 1, 1),
            rpn_cls: Conv2d::new("detector.rpn.cls", cfg.rpn_hidden, a, 1, 1),
            rpn_reg: Conv2d::new("detector.rpn.reg", cfg.rpn_hidden, 4 * a, 1, 1),
            fc1: Linear::new("detector.roi.fc1", roi_in, cfg.fc_hidden),
            fc2: Linear::new("detector.roi.fc2", cfg.fc_hidden, cfg.region_dim),
            cls: Linear::new("detector.head.cls", cfg.region_dim, cfg.num_classes + 1),
            bbox: Linear::new("detector.head.bbox", cfg.region_dim, 4 * cfg.num_classes),
            cfg,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Draws initial weights into `store`.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        for (down, extra) in &self.stages {
            down.init(store, rng);
            if let Some(e) = extra {
                e.init(store, rng);
            }
        }
        for c in self.laterals.iter().chain(&self.smooth) {
            c.init(store, rng);
        }
        self.rpn_conv.init(store, rng);
        let prior = 0.01f64;
        self.rpn_cls.init_with(store, rng, 0.01, -((1.0 - prior) / prior).ln());
        self.rpn_reg.init_with(store, rng, 0.01, 0.0);
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
        self.cls.init_with(store, rng, 0.01, 0.0);
        self.bbox.init_with(store, rng, 0.001, 0.0);
    }

    /// Four raw maps at strides 4, 8, 16, 32.
    pub fn backbone_forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<[Var; NUM_LEVELS]> {
        let shape = g.value(images).shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::validation(format!("backbone expects [N, 3, H, W], got {shape:?}")));
        }
        if shape[2] < MIN_INPUT_SIDE || shape[3] < MIN_INPUT_SIDE {
            return Err(Error::validation(format!(
                "input {}x{} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}",
                shape[2], shape[3]
            )));
        }
        let s = self.stem.forward(g, store, images);
        let mut x = g.relu(s);
        let mut out = Vec::with_capacity(NUM_LEVELS);
        for (down, extra) in &self.stages {
            let d = down.forward(g, store, x);
            x = g.relu(d);
            if let Some(e) = extra {
                let y = e.forward(g, store, x);
                x = g.relu(y);
            }
            out.push(x);
        }
        Ok(out.try_into().expect("four stages"))
    }

    pub fn build_pyramid<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, raw: &[Var; NUM_LEVELS]) -> Result<PyramidFeatures> {
        for l in 1..NUM_LEVELS {
            let (_, _, h0, w0) = g.value(raw[l - 1]).nchw();
            let (_, _, h1, w1) = g.value(raw[l]).nchw();
            if h1 > h0 || w1 > w0 || (h1 == h0 && w1 == w0) {
                return Err(Error::validation("raw maps must strictly decrease in size"));
            }
        }
        let lat: Vec<Var> = (0..NUM_LEVELS).map(|i| self.laterals[i].forward(g, store, raw[i])).collect();
        let mut merged = vec![lat[NUM_LEVELS - 1]; NUM_LEVELS];
        for i in (0..NUM_LEVELS - 1).rev() {
            let (_, _, h, w) = g.value(lat[i]).nchw();
            let up = g.upsample_nearest(merged[i + 1], h, w);
            merged[i] = g.add(lat[i], up);
        }
        let levels: Vec<Var> = (0..NUM_LEVELS).map(|i| self.smooth[i].forward(g, store, merged[i])).collect();
        Ok(PyramidFeatures { levels: levels.try_into().expect("four levels") })
    }

    /// Backbone plus pyramid on a batched input tensor.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<PyramidFeatures> {
        let raw = self.backbone_forward(g, store, images)?;
        self.build_pyramid(g, store, &raw)
    }

    pub fn rpn_forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pyr: &PyramidFeatures) -> RpnOutput {
        let mut objectness = Vec::with_capacity(NUM_LEVELS);
        let mut deltas = Vec::with_capacity(NUM_LEVELS);
        for &level in &pyr.levels {
            let h = self.rpn_conv.forward(g, store, level);
            let h = g.relu(h);
            objectness.push(self.rpn_cls.forward(g, store, h));
            deltas.push(self.rpn_reg.forward(g, store, h));
        }
        RpnOutput { objectness, deltas }
    }

    /// Decoded, clipped, suppressed proposals per image. `image_shapes`
    /// holds each image's unpadded `(height, width)`; `keep_any` is passed
    /// on to [`select_proposals`].
    pub fn propose_all<T: Real>(
        &self,
        g: &Graph<T>,
        rpn: &RpnOutput,
        anchors: &AnchorSet,
        image_shapes: &[(usize, usize)],
        params: &ProposalParams,
        keep_any: usize,
    ) -> Vec<ImageProposals> {
        let a = anchors.per_location;
        image_shapes
            .iter()
            .enumerate()
            .map(|(n, &(ih, iw))| {
                let mut cands = Vec::with_capacity(anchors.len());
                let mut scores = Vec::with_capacity(anchors.len());
                for l in 0..NUM_LEVELS {
                    let plane = anchors.level_plane(l);
                    let obj = g.value(rpn.objectness[l]).data();
                    let del = g.value(rpn.deltas[l]).data();
                    for local in 0..a * plane {
                        let (ai, yx) = (local / plane, local % plane);
                        let z = obj[n * a * plane + local].as_f64();
                        let base = n * 4 * a * plane + 4 * ai * plane + yx;
                        let d = [
                            del[base].as_f64(),
                            del[base + plane].as_f64(),
                            del[base + 2 * plane].as_f64(),
                            del[base + 3 * plane].as_f64(),
                        ];
                        let anchor = &anchors.boxes[anchors.offsets[l] + local];
                        cands.push(clip(&decode(anchor, &d, &RPN_CODE_WEIGHTS), ih as f64, iw as f64));
                        scores.push(sigmoid(z));
                    }
                }
                select_proposals(&cands, &scores, params, keep_any)
            })
            .collect()
    }

    /// Filtered proposals (score above the threshold, capped per image).
    pub fn propose_regions<T: Real>(
        &self,
        g: &Graph<T>,
        rpn: &RpnOutput,
        anchors: &AnchorSet,
        image_shapes: &[(usize, usize)],
    ) -> Vec<ImageProposals> {
        let p = &self.cfg.proposals;
        self.propose_all(g, rpn, anchors, image_shapes, p, 0)
            .into_iter()
            .map(|ip| ip.filtered(p.score_threshold, p.max_per_image))
            .collect()
    }

    /// RoIAlign plus two fully connected layers. Zero-area boxes are
    /// dropped and counted.
    pub fn extract_region_features<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyr: &PyramidFeatures,
        boxes: &[(usize, Bbox)],
    ) -> RegionFeatures {
        let mut rois = Vec::with_capacity(boxes.len());
        let mut kept = Vec::with_capacity(boxes.len());
        for (i, &(batch, bbox)) in boxes.iter().enumerate() {
            if area(&bbox) > 0.0 {
                rois.push(RoiRef { level: assign_level(&bbox), batch, bbox });
                kept.push(i);
            }
        }
        let dropped = boxes.len() - kept.len();
        let strides: Vec<f64> = STRIDES.iter().map(|&s| s as f64).collect();
        let pooled = g.roi_align(&pyr.levels, &strides, &rois, self.cfg.roi_size, self.cfg.roi_sampling);
        let h = self.fc1.forward(g, store, pooled);
        let h = g.relu(h);
        let f = self.fc2.forward(g, store, h);
        let features = g.relu(f);
        RegionFeatures { features, kept, dropped }
    }

    pub fn detection_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, features: Var) -> HeadOutput {
        HeadOutput { logits: self.cls.forward(g, store, features), deltas: self.bbox.forward(g, store, features) }
    }

    pub fn head_values<T: Real>(&self, g: &Graph<T>, head: &HeadOutput) -> DetectionOutput {
        let logits = g.value(head.logits).data();
        let k = self.cfg.num_classes + 1;
        let scores = softmax_rows(&logits.iter().map(|v| v.as_f64()).collect::<Vec<_>>(), k);
        let deltas = g.value(head.deltas).data().iter().map(|v| v.as_f64()).collect();
        DetectionOutput { scores, deltas, num_classes: self.cfg.num_classes }
    }

    /// Samples anchors and regions for the detection loss. `proposals` are
    /// the candidate regions per image; ground-truth boxes are appended to
    /// them before sampling.
    pub fn plan_sampling(
        &self,
        anchors: &AnchorSet,
        gt: &[&BoxSet],
        proposals: &[ImageProposals],
        rng: &mut impl Rng,
    ) -> SamplingPlan {
        let cfg = &self.cfg;
        let mut plan = SamplingPlan::default();
        for (n, gt_set) in gt.iter().enumerate() {
            let gt_boxes: Vec<Bbox> = gt_set.boxes.iter().map(|b| b.map(f64::from)).collect();

            // proposal-stage anchors
            let mut labels = vec![-1i8; anchors.len()];
            let mut matched = vec![0usize; anchors.len()];
            let mut best_for_gt = vec![0.0f64; gt_boxes.len()];
            let mut ious = vec![0.0f64; anchors.len() * gt_boxes.len()];
            for (i, a) in anchors.boxes.iter().enumerate() {
                let mut best = 0.0;
                for (j, b) in gt_boxes.iter().enumerate() {
                    let v = iou(a, b);
                    ious[i * gt_boxes.len() + j] = v;
                    if v > best {
                        best = v;
                        matched[i] = j;
                    }
                    best_for_gt[j] = best_for_gt[j].max(v);
                }
                labels[i] = if best >= cfg.positive_iou {
                    1
                } else if best < cfg.negative_iou {
                    0
                } else {
                    -1
                };
            }
            // every ground truth keeps its best-overlapping anchors
            for (j, &best) in best_for_gt.iter().enumerate() {
                if best <= 0.0 {
                    continue;
                }
                for i in 0..anchors.len() {
                    if ious[i * gt_boxes.len() + j] == best {
                        labels[i] = 1;
                        matched[i] = j;
                    }
                }
            }
            let pos: Vec<usize> = (0..anchors.len()).filter(|&i| labels[i] == 1).collect();
            let neg: Vec<usize> = (0..anchors.len()).filter(|&i| labels[i] == 0).collect();
            let want_pos = ((cfg.rpn_batch_per_image as f64 * cfg.rpn_positive_fraction) as usize).min(pos.len());
            let want_neg = (cfg.rpn_batch_per_image - want_pos).min(neg.len());
            for k in sample_indices(rng, pos.len(), want_pos) {
                let i = pos[k];
                plan.anchors.push(AnchorSample {
                    image: n,
                    anchor: i,
                    target: Some(encode(&anchors.boxes[i], &gt_boxes[matched[i]], &RPN_CODE_WEIGHTS)),
                });
            }
            for k in sample_indices(rng, neg.len(), want_neg) {
                plan.anchors.push(AnchorSample { image: n, anchor: neg[k], target: None });
            }

            // head regions
            let mut cands: Vec<Bbox> =
                proposals.get(n).map(|p| p.boxes.iter().copied().filter(|b| area(b) > 0.0).collect()).unwrap_or_default();
            cands.extend(gt_boxes.iter().copied());
            let mut fg = Vec::new();
            let mut bg = Vec::new();
            let mut cand_match = vec![0usize; cands.len()];
            for (i, c) in cands.iter().enumerate() {
                let mut best = 0.0;
                for (j, b) in gt_boxes.iter().enumerate() {
                    let v = iou(c, b);
                    if v > best {
                        best = v;
                        cand_match[i] = j;
                    }
                }
                if best >= cfg.positive_iou {
                    fg.push(i);
                } else if best < cfg.negative_iou {
                    bg.push(i);
                }
            }
            let want_fg = ((cfg.roi_batch_per_image as f64 * cfg.roi_positive_fraction) as usize).min(fg.len());
            let want_bg = (cfg.roi_batch_per_image - want_fg).min(bg.len());
            for k in sample_indices(rng, fg.len(), want_fg) {
                let i = fg[k];
                let j = cand_match[i];
                plan.rois.push(RoiSample {
                    image: n,
                    bbox: cands[i],
                    label: gt_set.class_ids[j] + 1,
                    target: Some(encode(&cands[i], &gt_boxes[j], &HEAD_CODE_WEIGHTS)),
                });
            }
            for k in sample_indices(rng, bg.len(), want_bg) {
                plan.rois.push(RoiSample { image: n, bbox: cands[bg[k]], label: 0, target: None });
            }
        }
        plan
    }

    /// Sum of the four detection terms on a fixed plan. Classification
    /// terms are averaged over sampled entries, regression terms over
    /// positives; a term with nothing to average is zero.
    pub fn detection_loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyr: &PyramidFeatures,
        rpn: &RpnOutput,
        anchors: &AnchorSet,
        plan: &SamplingPlan,
    ) -> Result<DetectionLoss> {
        let a = anchors.per_location;
        let mut terms: Vec<(Var, f64)> = Vec::new();
        let mut values = [0.0f64; 4];

        // proposal-stage classification and regression, gathered per level
        let mut cls_parts = Vec::new();
        let mut cls_targets = Vec::new();
        let mut reg_parts = Vec::new();
        let mut reg_targets = Vec::new();
        for l in 0..NUM_LEVELS {
            let plane = anchors.level_plane(l);
            let mut obj_idx = Vec::new();
            let mut del_idx = Vec::new();
            for s in &plan.anchors {
                let (level, local) = anchors.locate(s.anchor);
                if level != l {
                    continue;
                }
                obj_idx.push(s.image * a * plane + local);
                cls_targets.push(T::lit(if s.target.is_some() { 1.0 } else { 0.0 }));
                if let Some(t) = s.target {
                    let (ai, yx) = (local / plane, local % plane);
                    let base = s.image * 4 * a * plane + 4 * ai * plane + yx;
                    del_idx.extend((0..4).map(|j| base + j * plane));
                    reg_targets.extend(t.iter().map(|&v| T::lit(v)));
                }
            }
            if !obj_idx.is_empty() {
                cls_parts.push(g.gather(rpn.objectness[l], obj_idx));
            }
            if !del_idx.is_empty() {
                reg_parts.push(g.gather(rpn.deltas[l], del_idx));
            }
        }
        if !cls_parts.is_empty() {
            let z = g.concat0(&cls_parts);
            let count = cls_targets.len() as f64;
            let s = g.bce_logits_sum(z, cls_targets);
            values[0] = g.value(s).item().as_f64() / count;
            terms.push((s, 1.0 / count));
        }
        if !reg_parts.is_empty() {
            let d = g.concat0(&reg_parts);
            let count = (reg_targets.len() / 4) as f64;
            let s = g.smooth_l1_sum(d, reg_targets);
            values[1] = g.value(s).item().as_f64() / count;
            terms.push((s, 1.0 / count));
        }

        // head
        if !plan.rois.is_empty() {
            let boxes: Vec<(usize, Bbox)> = plan.rois.iter().map(|r| (r.image, r.bbox)).collect();
            let rf = self.extract_region_features(g, store, pyr, &boxes);
            if rf.dropped > 0 {
                return Err(Error::validation("sampling plan contains zero-area regions"));
            }
            let head = self.detection_head(g, store, rf.features);
            let labels: Vec<usize> = plan.rois.iter().map(|r| r.label).collect();
            let count = labels.len() as f64;
            let s = g.softmax_ce_sum(head.logits, labels);
            values[2] = g.value(s).item().as_f64() / count;
            terms.push((s, 1.0 / count));

            let k = self.cfg.num_classes;
            let mut idx = Vec::new();
            let mut targets = Vec::new();
            for (r, s) in plan.rois.iter().enumerate() {
                if let Some(t) = s.target {
                    let base = r * 4 * k + 4 * (s.label - 1);
                    idx.extend(base..base + 4);
                    targets.extend(t.iter().map(|&v| T::lit(v)));
                }
            }
            if !idx.is_empty() {
                let count = (idx.len() / 4) as f64;
                let d = g.gather(head.deltas, idx);
                let s = g.smooth_l1_sum(d, targets);
                values[3] = g.value(s).item().as_f64() / count;
                terms.push((s, 1.0 / count));
            }
        }

        let total = if terms.is_empty() {
            g.constant(Tensor::scalar(T::zero()))
        } else {
            let weighted: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::lit(w))).collect();
            g.lincomb(&weighted)
        };
        Ok(DetectionLoss { total, rpn_cls: values[0], rpn_reg: values[1], head_cls: values[2], head_reg: values[3] })
    }
}

/// Boxes clipped to an image, as f64.
pub fn clip_box(b: &Bbox, height: usize, width: usize) -> Bbox {
    boxes::clip(b, height as f64, width as f64)
}
