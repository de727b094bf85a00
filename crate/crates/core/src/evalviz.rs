//! Inference, mAP evaluation and the two analysis emitters: domain evidence
//! heatmaps and pooled feature tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::align::{domain_bce, TARGET_LOGIT};
use crate::autograd::Graph;
use crate::boxes::{clip, decode, Bbox};
use crate::detector::{batch_images, generate_anchors, HEAD_CODE_WEIGHTS};
use crate::error::{Error, Result};
use crate::model::AfanModel;
use crate::nn::ParamStore;
use crate::synthdata::{AnnotatedSample, BoxSet, Domain, ImageTensor};
use crate::tensor::Tensor;

pub use crate::boxes::{iou, nms};

pub const SCORE_THRESHOLD: f64 = 0.05;
pub const TEST_NMS_IOU: f64 = 0.5;
pub const MATCH_IOU: f64 = 0.5;
/// Detections kept per image after suppression.
pub const MAX_DETECTIONS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Bbox,
    pub class_id: usize,
    pub score: f64,
}

/// Output of [`detect`], with the proposal counts seen on the way.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub images: Vec<Vec<Detection>>,
    /// Filtered proposals per image (the set the instance discriminator sees).
    pub proposals_per_image: Vec<usize>,
    pub min_proposal_score: Option<f64>,
}

/// Full two-stage inference, one image at a time.
pub fn detect(
    model: &AfanModel,
    store: &ParamStore<f32>,
    images: &[&ImageTensor],
    score_threshold: f64,
    nms_iou: f64,
) -> Result<DetectionResult> {
    let det = &model.detector;
    let k = det.num_classes();
    let mut out = DetectionResult::default();
    for img in images {
        let mut g = Graph::frozen();
        let x = g.constant(batch_images::<f32>(&[img])?);
        let (_, _, h, w) = g.value(x).nchw();
        let pyr = det.features(&mut g, store, x)?;
        let rpn = det.rpn_forward(&mut g, store, &pyr);
        let anchors = generate_anchors(&det.cfg, h, w);
        let props = det.propose_regions(&g, &rpn, &anchors, &[(img.height(), img.width())]).remove(0);
        out.proposals_per_image.push(props.len());
        if let Some(&m) = props.scores.last() {
            out.min_proposal_score = Some(out.min_proposal_score.map_or(m, |o: f64| o.min(m)));
        }
        if props.is_empty() {
            out.images.push(Vec::new());
            continue;
        }
        let boxes: Vec<(usize, Bbox)> = props.boxes.iter().map(|&b| (0, b)).collect();
        let rf = det.extract_region_features(&mut g, store, &pyr, &boxes);
        let head = det.detection_head(&mut g, store, rf.features);
        let values = det.head_values(&g, &head);
        let mut found = Vec::new();
        for c in 0..k {
            let mut cb = Vec::new();
            let mut cs = Vec::new();
            for (r, &pi) in rf.kept.iter().enumerate() {
                let s = values.row(r)[c + 1];
                if s < score_threshold {
                    continue;
                }
                let b = clip(&decode(&props.boxes[pi], &values.class_deltas(r, c), &HEAD_CODE_WEIGHTS), img.height() as f64, img.width() as f64);
                if b[2] > b[0] && b[3] > b[1] {
                    cb.push(b);
                    cs.push(s);
                }
            }
            for i in nms(&cb, &cs, nms_iou) {
                found.push(Detection { bbox: cb[i], class_id: c, score: cs[i] });
            }
        }
        found.sort_by(|a, b| b.score.total_cmp(&a.score));
        found.truncate(MAX_DETECTIONS);
        out.images.push(found);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub name: String,
    pub ap: f64,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub map: f64,
    pub num_images: usize,
    pub num_ground_truth: usize,
    pub num_detections: usize,
    /// Classes detected but absent from every ground truth; not in the mAP.
    pub excluded_classes: Vec<usize>,
}

/// Area under the precision/recall curve with the precision envelope
/// (all-point interpolation). `tp` flags detections in descending score order.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            t += 1;
        } else {
            f += 1;
        }
        recall.push(t as f64 / num_gt as f64);
        precision.push(t as f64 / (t + f) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Per-class AP at IoU 0.5 and their mean over classes with ground truth.
/// Detections are ranked by score, ties by image index, then index within
/// the image.
pub fn evaluate(detections: &[Vec<Detection>], ground_truth: &[&BoxSet], class_names: &[String]) -> Result<EvalReport> {
    if detections.len() != ground_truth.len() {
        return Err(Error::validation(format!(
            "{} detection lists for {} ground-truth images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let k = class_names.len();
    let mut classes = Vec::new();
    let mut excluded = Vec::new();
    let mut aps = Vec::new();
    let mut total_det = 0;
    for c in 0..k {
        let mut ranked: Vec<(usize, usize, &Detection)> = Vec::new();
        for (i, dets) in detections.iter().enumerate() {
            for (j, d) in dets.iter().enumerate() {
                if d.class_id == c {
                    ranked.push((i, j, d));
                }
            }
        }
        ranked.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let gts: Vec<Vec<Bbox>> = ground_truth
            .iter()
            .map(|g| g.boxes.iter().zip(&g.class_ids).filter(|(_, &cid)| cid == c).map(|(b, _)| b.map(f64::from)).collect())
            .collect();
        let num_gt: usize = gts.iter().map(Vec::len).sum();
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let tp: Vec<bool> = ranked
            .iter()
            .map(|&(i, _, d)| {
                let best = (0..gts[i].len())
                    .filter(|&m| !used[i][m])
                    .map(|m| (m, iou(&d.bbox, &gts[i][m])))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                match best {
                    Some((m, v)) if v >= MATCH_IOU => {
                        used[i][m] = true;
                        true
                    }
                    _ => false,
                }
            })
            .collect();
        total_det += ranked.len();
        let ap = average_precision(&tp, num_gt);
        if num_gt == 0 {
            if !ranked.is_empty() {
                excluded.push(c);
            }
        } else {
            aps.push(ap);
        }
        classes.push(ClassReport {
            class_id: c,
            name: class_names[c].clone(),
            ap,
            num_ground_truth: num_gt,
            num_detections: ranked.len(),
        });
    }
    for dets in detections {
        if let Some(d) = dets.iter().find(|d| d.class_id >= k) {
            return Err(Error::validation(format!("detection class {} outside {k} classes", d.class_id)));
        }
    }
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok(EvalReport {
        classes,
        map,
        num_images: detections.len(),
        num_ground_truth: ground_truth.iter().map(|g| g.len()).sum(),
        num_detections: total_det,
        excluded_classes: excluded,
    })
}

/// Runs [`detect`] over annotated samples and evaluates the result.
pub fn evaluate_samples(
    model: &AfanModel,
    store: &ParamStore<f32>,
    samples: &[AnnotatedSample],
    class_names: &[String],
) -> Result<(EvalReport, DetectionResult)> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.image).collect();
    let result = detect(model, store, &images, SCORE_THRESHOLD, TEST_NMS_IOU)?;
    let gts: Vec<&BoxSet> = samples
        .iter()
        .map(|s| s.annotation.as_ref().ok_or_else(|| Error::validation(format!("sample {} has no annotation", s.image_id))))
        .collect::<Result<_>>()?;
    Ok((evaluate(&result.images, &gts, class_names)?, result))
}

/// Class-activation map: channel weights are the spatial means of the
/// gradients, the map is the rectified weighted channel sum. Both inputs are
/// `[C, H, W]`; returns `H * W` values.
pub fn class_activation(activations: &[f32], gradients: &[f32], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut map = vec![0.0f64; hw];
    for ch in 0..c {
        let g = &gradients[ch * hw..(ch + 1) * hw];
        let weight = g.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
        for (m, &a) in map.iter_mut().zip(&activations[ch * hw..(ch + 1) * hw]) {
            *m += weight * a as f64;
        }
    }
    map.iter().map(|&v| v.max(0.0)).collect()
}

/// Bilinear upsampling (half-pixel centres, edge clamped) of an `h x w` map.
pub fn upsample_map(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize, out: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bot = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn max_normalize(map: &mut [f64]) {
    let m = map.iter().copied().fold(0.0, f64::max);
    if m > 0.0 {
        map.iter_mut().for_each(|v| *v /= m);
    }
}

/// Single-channel heatmap in `[0, 1]` at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn to_gray8(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.values[y as usize * self.width + x as usize];
            image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8().save(path)?;
        Ok(())
    }
}

/// Where the feature discriminator finds evidence of the image's true
/// domain on the finest pyramid level. The map weights channels by the
/// averaged gradient of the domain log-likelihood (the negated domain loss),
/// as in the usual class-activation recipe.
pub fn domain_evidence_map(model: &AfanModel, store: &ParamStore<f32>, image: &ImageTensor, domain: Domain) -> Result<Heatmap> {
    let mut g = Graph::frozen();
    let x = g.constant(batch_images::<f32>(&[image])?);
    let pyr = model.detector.features(&mut g, store, x)?;
    let finest = g.value(pyr.levels[0]).clone();
    let (_, c, h, w) = finest.nchw();
    let a = g.leaf(finest.clone());
    let logits = model.feature_disc.forward(&mut g, store, a, false)?;
    let p = g.softmax_component(logits, TARGET_LOGIT);
    let mu = if domain == Domain::Target { 1.0 } else { 0.0 };
    let loss = g.soft_bce_mean(p, vec![mu], crate::align::PROB_CLAMP);
    let grads = g.backward(loss);
    let grad = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(finest.shape()));
    let neg: Vec<f32> = grad.data().iter().map(|&v| -v).collect();
    let cam = class_activation(finest.data(), &neg, c, h, w);
    let mut values = upsample_map(&cam, h, w, image.height(), image.width());
    max_normalize(&mut values);
    Ok(Heatmap { height: image.height(), width: image.width(), values })
}

/// Scalar domain loss of one image under the feature discriminator, for
/// diagnostics.
pub fn image_domain_loss(model: &AfanModel, store: &ParamStore<f32>, image: &ImageTensor, domain: Domain) -> Result<f64> {
    let mut g = Graph::frozen();
    let x = g.constant(batch_images::<f32>(&[image])?);
    let pyr = model.detector.features(&mut g, store, x)?;
    let mu = if domain == Domain::Target { 1.0 } else { 0.0 };
    let mut total = 0.0;
    for &level in &pyr.levels {
        let logits = model.feature_disc.forward(&mut g, store, level, false)?;
        let p = g.softmax_component(logits, TARGET_LOGIT);
        total += domain_bce(mu, g.value(p).item() as f64);
    }
    Ok(total / pyr.levels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Pyramid,
    Region,
}

impl FeatureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Pyramid => "pyramid",
            FeatureKind::Region => "region",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub domain: Domain,
    pub kind: FeatureKind,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub rows: Vec<FeatureRow>,
    /// Images without proposals, hence without a region row.
    pub missing_region_rows: usize,
}

impl FeatureTable {
    pub fn of_kind(&self, kind: FeatureKind) -> impl Iterator<Item = &FeatureRow> {
        self.rows.iter().filter(move |r| r.kind == kind)
    }

    /// Tab-separated text with a header `image_id domain kind v0 ... vD`.
    /// Rows shorter than the widest kind leave the trailing cells empty.
    pub fn to_tsv(&self) -> String {
        let width = self.rows.iter().map(|r| r.values.len()).max().unwrap_or(0);
        let mut s = String::from("image_id\tdomain\tkind");
        for i in 0..width {
            let _ = write!(s, "\tv{i}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}", r.image_id, r.domain.as_str(), r.kind.as_str());
            for v in &r.values {
                let _ = write!(s, "\t{}", *v as f32);
            }
            for _ in r.values.len()..width {
                s.push('\t');
            }
            s.push('\n');
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Per image: the spatial mean of the finest pyramid level, and the mean
/// region feature over its filtered proposals.
pub fn export_features(model: &AfanModel, store: &ParamStore<f32>, samples: &[AnnotatedSample]) -> Result<FeatureTable> {
    let det = &model.detector;
    let mut table = FeatureTable::default();
    for s in samples {
        let mut g = Graph::frozen();
        let x = g.constant(batch_images::<f32>(&[&s.image])?);
        let (_, _, h, w) = g.value(x).nchw();
        let pyr = det.features(&mut g, store, x)?;
        let pooled = g.global_avg_pool(pyr.levels[0]);
        table.rows.push(FeatureRow {
            image_id: s.image_id.clone(),
            domain: s.domain,
            kind: FeatureKind::Pyramid,
            values: g.value(pooled).data().iter().map(|&v| v as f64).collect(),
        });
        let rpn = det.rpn_forward(&mut g, store, &pyr);
        let anchors = generate_anchors(&det.cfg, h, w);
        let props = det.propose_regions(&g, &rpn, &anchors, &[(s.image.height(), s.image.width())]).remove(0);
        let boxes: Vec<(usize, Bbox)> = props.boxes.iter().map(|&b| (0, b)).collect();
        if boxes.is_empty() {
            table.missing_region_rows += 1;
            continue;
        }
        let rf = det.extract_region_features(&mut g, store, &pyr, &boxes);
        let f = g.value(rf.features);
        let (r, d) = (f.shape()[0], f.shape()[1]);
        let mut mean = vec![0.0f64; d];
        for row in f.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64 / r as f64;
            }
        }
        table.rows.push(FeatureRow { image_id: s.image_id.clone(), domain: s.domain, kind: FeatureKind::Region, values: mean });
    }
    Ok(table)
}

/// Two leading principal axes of a point set and the projections onto them.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
    pub projected: Vec<[f64; 2]>,
}

/// Principal component analysis to two dimensions. Axis signs are fixed so
/// the largest-magnitude coordinate is positive.
pub fn pca_2d(points: &[Vec<f64>]) -> Result<Pca2> {
    let n = points.len();
    if n < 2 {
        return Err(Error::validation("PCA needs at least two points"));
    }
    let d = points[0].len();
    if d < 2 || points.iter().any(|p| p.len() != d) {
        return Err(Error::validation("PCA needs points of one dimension, at least 2"));
    }
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| points[i][j] - mean[j]);
    let denom = (n - 1) as f64;
    // eigenvectors of the smaller of the covariance and Gram matrices
    let (values, vectors) = if d <= n {
        let cov = x.transpose() * &x / denom;
        let e = SymmetricEigen::new(cov);
        (e.eigenvalues, e.eigenvectors)
    } else {
        let gram = &x * x.transpose() / denom;
        let e = SymmetricEigen::new(gram);
        let mut v = x.transpose() * &e.eigenvectors;
        for mut col in v.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        (e.eigenvalues, v)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let axis = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = vectors.column(order[k]).iter().copied().collect();
        let big = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if big < 0.0 {
            col.iter().map(|v| -v).collect()
        } else {
            col
        }
    };
    let axes = [axis(0), axis(1)];
    let projected = (0..n)
        .map(|i| {
            let row = x.row(i);
            [0, 1].map(|k| row.iter().zip(&axes[k]).map(|(a, b)| a * b).sum())
        })
        .collect();
    Ok(Pca2 { mean, axes, variances: [values[order[0]], values[order[1]]], projected })
}

/// Ground-truth box count per class.
pub fn class_histogram(samples: &[AnnotatedSample]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for s in samples {
        if let Some(a) = &s.annotation {
            for &c in &a.class_ids {
                *h.entry(c).or_insert(0) += 1;
            }
        }
    }
    h
}
