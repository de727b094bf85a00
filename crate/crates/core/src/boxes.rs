//! Axis-aligned box geometry: overlap, suppression and the usual
//! centre/size regression encoding.

/// `(x1, y1, x2, y2)` in pixels.
pub type Bbox = [f64; 4];

pub fn area(b: &Bbox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Visits boxes by descending score (ties
/// by lower index), keeps a box unless it overlaps an already kept box by
/// more than `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[Bbox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    nms_until(boxes, scores, iou_threshold, |_, _| false)
}

/// [`nms`] that stops before visiting a box once `stop(kept so far, score
/// of that box)` returns true. The result is a prefix of `nms`'s.
pub fn nms_until(boxes: &[Bbox], scores: &[f64], iou_threshold: f64, mut stop: impl FnMut(usize, f64) -> bool) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms needs one score per box");
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut keep = Vec::new();
    let mut kept: Vec<(Bbox, f64)> = Vec::new();
    'visit: for &j in &order {
        if stop(keep.len(), scores[j]) {
            break;
        }
        let b = &boxes[j];
        let area_b = area(b);
        for (a, area_a) in &kept {
            let iw = a[2].min(b[2]) - a[0].max(b[0]);
            let ih = a[3].min(b[3]) - a[1].max(b[1]);
            if iw <= 0.0 || ih <= 0.0 {
                continue;
            }
            let inter = iw * ih;
            let union = area_a + area_b - inter;
            if union > 0.0 && inter / union > iou_threshold {
                continue 'visit;
            }
        }
        keep.push(j);
        kept.push((*b, area_b));
    }
    keep
}

pub fn clip(b: &Bbox, height: f64, width: f64) -> Bbox {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

/// Per-coordinate weights of the regression encoding.
pub type CodeWeights = [f64; 4];

/// Largest log-scale delta accepted when decoding.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Regression target taking `reference` onto `target`.
pub fn encode(reference: &Bbox, target: &Bbox, w: &CodeWeights) -> [f64; 4] {
    let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
    let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
    let (tw, th) = (target[2] - target[0], target[3] - target[1]);
    let (tx, ty) = (target[0] + 0.5 * tw, target[1] + 0.5 * th);
    [
        w[0] * (tx - rx) / rw,
        w[1] * (ty - ry) / rh,
        w[2] * (tw / rw).ln(),
        w[3] * (th / rh).ln(),
    ]
}

/// Inverse of [`encode`], with the scale deltas clamped.
pub fn decode(reference: &Bbox, deltas: &[f64; 4], w: &CodeWeights) -> Bbox {
    let (rw, rh) = (reference[2] - reference[0], reference[3] - reference[1]);
    let (rx, ry) = (reference[0] + 0.5 * rw, reference[1] + 0.5 * rh);
    let dx = deltas[0] / w[0];
    let dy = deltas[1] / w[1];
    let dw = (deltas[2] / w[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / w[3]).min(MAX_LOG_SCALE);
    let (cx, cy) = (rx + dx * rw, ry + dy * rh);
    let (bw, bh) = (rw * dw.exp(), rh * dh.exp());
    [cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh]
}
