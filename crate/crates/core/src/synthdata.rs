//! Synthetic two-domain detection data.
//!
//! Source scenes are clean renders of coloured discs, squares and
//! triangles on textured backgrounds; target scenes are independent renders
//! pushed through fog or night corruption. Datasets persist as one JSON
//! manifest per split plus lossless 8-bit PNG images, and all pixel values
//! live on the 1/255 grid so a write/load cycle is exact.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_at};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FOG_COLOR: [f32; 3] = [0.78, 0.78, 0.80];
pub const MIN_IMAGE_SIDE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// RGB image, channel-major (`C x H x W`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(Error::validation(format!(
                "image {height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != 3 * height * width {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {}",
                data.len(),
                3 * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::validation(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self::new(height, width, data)
    }

    pub(crate) fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Rounds every value onto the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let n = self.height * self.width;
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push((self.data[c * n + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("buffer sized")
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let n = w * h;
        let mut data = vec![0.0f32; 3 * n];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = px.0[c] as f32 / 255.0;
            }
        }
        Self::new(h, w, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }
}

/// Ground-truth boxes `(x1, y1, x2, y2)` in pixels with class ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<[f32; 4]>,
    pub class_ids: Vec<usize>,
}

impl BoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn validate(&self, height: usize, width: usize, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::validation("boxes and class_ids differ in length"));
        }
        for (b, &c) in self.boxes.iter().zip(&self.class_ids) {
            if !(b[0] < b[2] && b[1] < b[3]) {
                return Err(Error::validation(format!("box {b:?} is not (x1 < x2, y1 < y2)")));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > width as f32 || b[3] > height as f32 {
                return Err(Error::validation(format!("box {b:?} outside {width}x{height} image")));
            }
            if c >= num_classes {
                return Err(Error::validation(format!("class id {c} >= {num_classes}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub image_id: String,
    pub image: ImageTensor,
    pub annotation: Option<BoxSet>,
    pub domain: Domain,
}

impl AnnotatedSample {
    /// Copy with the annotation removed, as target samples are seen during
    /// adaptation.
    pub fn unlabeled(&self) -> Self {
        Self { annotation: None, ..self.clone() }
    }
}

/// Toy scene parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub class_names: Vec<String>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_side: f32,
    pub max_side: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            class_names: vec!["disc".into(), "square".into(), "triangle".into()],
            min_objects: 1,
            max_objects: 5,
            min_side: 10.0,
            max_side: 36.0,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_IMAGE_SIDE || self.width < MIN_IMAGE_SIDE {
            return Err(Error::validation("scene smaller than 16x16"));
        }
        if self.class_names.is_empty() || self.class_names.len() > 3 {
            return Err(Error::validation("the toy renderer draws between 1 and 3 shape classes"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::validation("need 1 <= min_objects <= max_objects"));
        }
        let limit = self.height.min(self.width) as f32;
        if !(self.min_side > 0.0 && self.min_side <= self.max_side && self.max_side <= limit) {
            return Err(Error::validation("object sides must satisfy 0 < min <= max <= image side"));
        }
        Ok(())
    }
}

/// One record of a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_file: String,
    pub domain: Domain,
    pub boxes: Vec<[f32; 4]>,
    pub class_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub samples: Vec<SampleRecord>,
    #[serde(skip)]
    pub root: PathBuf,
}

/// A loaded split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Fog,
    Night,
}

impl std::str::FromStr for CorruptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fog" => Ok(Self::Fog),
            "night" => Ok(Self::Night),
            other => Err(Error::validation(format!("unknown corruption mode {other:?}"))),
        }
    }
}

fn check_severity(severity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::validation(format!("severity {severity} outside [0, 1]")));
    }
    Ok(())
}

/// Fog blend with an explicit per-row depth in `[0, 1]`, before blur.
pub fn fog_blend(image: &ImageTensor, severity: f64, depth: impl Fn(usize) -> f64) -> ImageTensor {
    let (h, w) = (image.height, image.width);
    let mut data = image.data.clone();
    for (c, &fog) in FOG_COLOR.iter().enumerate() {
        for y in 0..h {
            let s = (severity * depth(y)) as f32;
            for v in &mut data[(c * h + y) * w..(c * h + y + 1) * w] {
                *v = (1.0 - s) * *v + s * fog;
            }
        }
    }
    ImageTensor::from_raw(h, w, data)
}

/// 3x3 box filter with edge replication.
pub fn box_blur(image: &ImageTensor) -> ImageTensor {
    let (h, w) = (image.height, image.width);
    let mut out = vec![0.0f32; image.data.len()];
    for c in 0..3 {
        let p = image.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in [-1isize, 0, 1] {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in [-1isize, 0, 1] {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        acc += p[yy * w + xx];
                    }
                }
                out[(c * h + y) * w + x] = acc / 9.0;
            }
        }
    }
    ImageTensor::from_raw(h, w, out)
}

/// Depth proxy: 1 on the top row (far), 0 on the bottom row (near).
pub fn depth_proxy(y: usize, height: usize) -> f64 {
    if height <= 1 {
        return 1.0;
    }
    1.0 - y as f64 / (height - 1) as f64
}

/// Shifts a clean render into the target domain.
pub fn corrupt_to_target(
    image: &ImageTensor,
    severity: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<ImageTensor> {
    check_severity(severity)?;
    if severity == 0.0 {
        return Ok(image.clone());
    }
    let out = match mode {
        CorruptionMode::Fog => {
            let h = image.height;
            let mut img = fog_blend(image, severity, |y| depth_proxy(y, h));
            for _ in 0..(2.0 * severity).ceil() as usize {
                img = box_blur(&img);
            }
            img
        }
        CorruptionMode::Night => {
            let mut rng = stream_at(seed, "night-noise", 0);
            let gain = (1.0 - 0.8 * severity) as f32;
            let sigma = 0.04 * severity;
            let data = image
                .data
                .iter()
                .map(|&v| v * gain + (rng.sample::<f64, _>(StandardNormal) * sigma) as f32)
                .collect();
            ImageTensor::from_raw(image.height, image.width, data)
        }
    };
    let clipped = out.data.iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(ImageTensor::from_raw(image.height, image.width, clipped))
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc,
    Square,
    Triangle,
}

impl Shape {
    fn from_class(c: usize) -> Self {
        match c {
            0 => Shape::Disc,
            1 => Shape::Square,
            _ => Shape::Triangle,
        }
    }

    /// Whether point `(px, py)` lies in the shape with bounding square
    /// `(x0, y0, side)`.
    fn contains(self, x0: f32, y0: f32, side: f32, px: f32, py: f32) -> bool {
        match self {
            Shape::Disc => {
                let r = side / 2.0;
                let (dx, dy) = (px - (x0 + r), py - (y0 + r));
                dx * dx + dy * dy <= r * r
            }
            Shape::Square => px >= x0 && px <= x0 + side && py >= y0 && py <= y0 + side,
            Shape::Triangle => {
                // apex at top centre, base along the bottom edge
                if py < y0 || py > y0 + side {
                    return false;
                }
                let half = 0.5 * side * (py - y0) / side;
                let cx = x0 + side / 2.0;
                (px - cx).abs() <= half
            }
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn iou_f32(a: &[f32; 4], b: &[f32; 4]) -> f32 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Renders one clean scene. Boxes are the exact geometric extents.
pub fn render_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> (ImageTensor, BoxSet) {
    let (h, w) = (cfg.height, cfg.width);
    let n = h * w;
    // background: two-colour diagonal gradient with sinusoidal stripes
    let base_a = hsv_to_rgb(rng.random(), rng.random_range(0.05..0.35), rng.random_range(0.25..0.65));
    let base_b = hsv_to_rgb(rng.random(), rng.random_range(0.05..0.35), rng.random_range(0.25..0.65));
    let freq = rng.random_range(0.08f32..0.35);
    let angle = rng.random_range(0.0f32..std::f32::consts::PI);
    let amp = rng.random_range(0.02f32..0.08);
    let (ca, sa) = (angle.cos(), angle.sin());
    let mut data = vec![0.0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let t = (x + y) as f32 / (h + w) as f32;
            let stripe = amp * ((x as f32 * ca + y as f32 * sa) * freq).sin();
            for c in 0..3 {
                let v = (1.0 - t) * base_a[c] + t * base_b[c] + stripe;
                data[c * n + y * w + x] = v;
            }
        }
    }
    // speckle texture
    for v in data.iter_mut() {
        *v += rng.random_range(-0.03f32..0.03);
    }

    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes = BoxSet::default();
    let mut attempts = 0;
    while boxes.len() < count && attempts < 50 * count {
        attempts += 1;
        let side = rng.random_range(cfg.min_side..=cfg.max_side);
        let x0 = rng.random_range(0.0..=(w as f32 - side));
        let y0 = rng.random_range(0.0..=(h as f32 - side));
        let b = [x0, y0, x0 + side, y0 + side];
        if boxes.boxes.iter().any(|o| iou_f32(o, &b) > 0.2) {
            continue;
        }
        let class = rng.random_range(0..cfg.num_classes());
        let color = hsv_to_rgb(rng.random(), rng.random_range(0.6..1.0), rng.random_range(0.75..1.0));
        let shape = Shape::from_class(class);
        let (xa, xb) = (x0.floor() as usize, ((x0 + side).ceil() as usize).min(w));
        let (ya, yb) = (y0.floor() as usize, ((y0 + side).ceil() as usize).min(h));
        for py in ya..yb {
            for px in xa..xb {
                // 2x2 supersampled coverage
                let mut cover = 0.0f32;
                for (sx, sy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if shape.contains(x0, y0, side, px as f32 + sx, py as f32 + sy) {
                        cover += 0.25;
                    }
                }
                if cover > 0.0 {
                    for c in 0..3 {
                        let v = &mut data[c * n + py * w + px];
                        *v = (1.0 - cover) * *v + cover * color[c];
                    }
                }
            }
        }
        boxes.boxes.push(b);
        boxes.class_ids.push(class);
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (ImageTensor::from_raw(h, w, data).quantized(), boxes)
}

/// The four manifests written by [`generate_domain_pair`].
#[derive(Clone, Debug)]
pub struct DomainPair {
    pub source_train: DatasetManifest,
    pub source_val: DatasetManifest,
    pub target_train: DatasetManifest,
    pub target_val: DatasetManifest,
}

/// Renders one sample of `(domain, split, index)` deterministically.
pub fn generate_sample(
    cfg: &SceneConfig,
    domain: Domain,
    split: &str,
    index: usize,
    severity: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<(ImageTensor, BoxSet)> {
    let tag = format!("scene/{}/{split}", domain.as_str());
    let mut rng = stream_at(seed, &tag, index as u64);
    let (clean, boxes) = render_scene(cfg, &mut rng);
    let image = match domain {
        Domain::Source => clean,
        Domain::Target => {
            let cseed = derive_seed(seed, &format!("corrupt/{split}"), index as u64);
            corrupt_to_target(&clean, severity, mode, cseed)?.quantized()
        }
    };
    Ok((image, boxes))
}

/// `count` annotated samples of one domain and split, in memory.
pub fn generate_split(
    cfg: &SceneConfig,
    domain: Domain,
    split: &str,
    count: usize,
    severity: f64,
    mode: CorruptionMode,
    seed: u64,
) -> Result<Vec<AnnotatedSample>> {
    cfg.validate()?;
    check_severity(severity)?;
    (0..count)
        .map(|i| {
            let (image, boxes) = generate_sample(cfg, domain, split, i, severity, mode, seed)?;
            Ok(AnnotatedSample {
                image_id: format!("{}-{split}-{i:06}", domain.as_str()),
                image,
                annotation: Some(boxes),
                domain,
            })
        })
        .collect()
}

/// Writes source/target train and val splits under `out`:
/// `out/{source,target}/{train,val}/manifest.json` plus `images/*.png`.
pub fn generate_domain_pair(
    cfg: &SceneConfig,
    n_train: usize,
    n_val: usize,
    severity: f64,
    mode: CorruptionMode,
    seed: u64,
    out: &Path,
) -> Result<DomainPair> {
    cfg.validate()?;
    check_severity(severity)?;
    if n_train == 0 || n_val == 0 {
        return Err(Error::validation("n_train and n_val must be at least 1"));
    }
    let mut manifests = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for (split, count) in [("train", n_train), ("val", n_val)] {
            let samples = generate_split(cfg, domain, split, count, severity, mode, seed)?;
            let dir = out.join(domain.as_str()).join(split);
            manifests.push(write_dataset(&dir, split, &cfg.class_names, &samples)?);
        }
    }
    let mut it = manifests.into_iter();
    let mut next = || it.next().expect("four manifests");
    Ok(DomainPair { source_train: next(), source_val: next(), target_train: next(), target_val: next() })
}

/// Writes `samples` as a split directory and returns its manifest.
pub fn write_dataset(
    dir: &Path,
    split: &str,
    class_names: &[String],
    samples: &[AnnotatedSample],
) -> Result<DatasetManifest> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("images/{i:06}.png");
        s.image.save_png(&dir.join(&file)).map_err(|e| match e {
            Error::Image(image::ImageError::IoError(io)) => Error::io(dir.join(&file), io),
            other => other,
        })?;
        let ann = s.annotation.clone().unwrap_or_default();
        records.push(SampleRecord {
            image_file: file,
            domain: s.domain,
            boxes: ann.boxes,
            class_ids: ann.class_ids,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        split: split.to_string(),
        num_classes: class_names.len(),
        class_names: class_names.to_vec(),
        samples: records,
        root: dir.to_path_buf(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a split from its directory or its manifest file. Every record is
/// validated against its image.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let (dir, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    let text = fs::read_to_string(&file)
        .map_err(|e| Error::format(None, format!("cannot read manifest {}: {e}", file.display())))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(None, format!("corrupt manifest {}: {e}", file.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version(format!("manifest version {} (expected {MANIFEST_VERSION})", manifest.version)));
    }
    if manifest.class_names.len() != manifest.num_classes {
        return Err(Error::format(None, "class_names length differs from num_classes"));
    }
    manifest.root = dir.clone();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, rec) in manifest.samples.iter().enumerate() {
        let img_path = dir.join(&rec.image_file);
        if !img_path.is_file() {
            return Err(Error::format(Some(i), format!("missing image file {}", rec.image_file)));
        }
        let image = ImageTensor::load_png(&img_path)
            .map_err(|e| Error::format(Some(i), format!("unreadable image {}: {e}", rec.image_file)))?;
        let ann = BoxSet { boxes: rec.boxes.clone(), class_ids: rec.class_ids.clone() };
        ann.validate(image.height(), image.width(), manifest.num_classes)
            .map_err(|e| Error::validation(format!("record {i} ({}): {e}", rec.image_file)))?;
        let stem = Path::new(&rec.image_file)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| i.to_string());
        samples.push(AnnotatedSample {
            image_id: format!("{}-{}-{stem}", rec.domain.as_str(), manifest.split),
            image,
            annotation: Some(ann),
            domain: rec.domain,
        });
    }
    Ok(Dataset { manifest, samples })
}
