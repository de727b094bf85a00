//! Plain-Rust side of the demo, usable (and tested) off the browser.

use afan_core::idig::{gaussian_samples, mix_images, predicted_ratio, verify_reduction};
use afan_core::rng::stream_at;
use afan_core::synthdata::{generate_sample, BoxSet, CorruptionMode, Domain, ImageTensor, SceneConfig};
use afan_core::Result;

pub const SIDE: usize = 96;

/// Interleaved 8-bit RGBA, alpha 255.
pub fn to_rgba(image: &ImageTensor) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

/// Boxes as `[x1, y1, x2, y2, class]` rows, flattened.
pub fn flat_boxes(boxes: &BoxSet) -> Vec<f32> {
    boxes.boxes.iter().zip(&boxes.class_ids).flat_map(|(b, &c)| [b[0], b[1], b[2], b[3], c as f32]).collect()
}

pub fn scene(seed: u64, index: usize, domain: Domain, severity: f64, mode: CorruptionMode) -> Result<(ImageTensor, BoxSet)> {
    generate_sample(&SceneConfig::default(), domain, "demo", index, severity, mode, seed)
}

/// Source and target scene `index`, mixed both ways with `lambda`.
pub fn mixed_pair(seed: u64, index: usize, severity: f64, lambda: f64) -> Result<(ImageTensor, ImageTensor, BoxSet)> {
    let (xs, boxes) = scene(seed, index, Domain::Source, 0.0, CorruptionMode::Fog)?;
    let (xt, _) = scene(seed, index, Domain::Target, severity, CorruptionMode::Fog)?;
    let (ms, mt) = mix_images(&xs, &xt, lambda)?;
    Ok((ms, mt, boxes))
}

/// `(lambda_max, predicted, measured)` triples on two unit Gaussians one
/// unit apart per coordinate.
pub fn energy_curve(seed: u64, points: usize, n_mix: usize) -> Result<Vec<[f64; 3]>> {
    let source = gaussian_samples(2000, 2, 0.0, &mut stream_at(seed, "energy/source", 0));
    let target = gaussian_samples(2000, 2, 1.0, &mut stream_at(seed, "energy/target", 0));
    (1..=points)
        .map(|i| {
            let lm = 0.5 * i as f64 / points as f64;
            let r = verify_reduction(&source, &target, lm, n_mix, &mut stream_at(seed, "energy/mix", i as u64))?;
            Ok([lm, predicted_ratio(lm), r.ratio_measured])
        })
        .collect()
}
