//! Synthetic "occluded shapes" multi-label dataset, manifests, augmentation
//! and batching.
//!
//! Each image shows 1-4 coloured shapes on a noisy background. A class is a
//! (shape, colour) pair; an image's label vector marks every class with at
//! least one object present. Objects are painted in z-order and some are
//! deliberately placed so a later object covers part of an earlier one; the
//! per-object metadata records the fraction of each object's own pixels that
//! ended up overdrawn.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An object whose bounding size is at most this (on a 64-pixel canvas) is small.
pub const SMALL_OBJECT_PX: f64 = 12.0;

/// An object with more than this fraction of its pixels overdrawn is occluded.
pub const OCCLUDED_FRACTION: f64 = 0.3;

/// Band of overdrawn fraction aimed for when placing a deliberate occluder.
const OCCLUSION_BAND: [f64; 2] = [0.35, 0.75];

const PLACEMENT_ATTEMPTS: usize = 200;

/// Fresh class and size draws allowed for a deliberate occluder.
const OCCLUDER_ROUNDS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

pub const SHAPES: [ShapeKind; 6] = [
    ShapeKind::Circle,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Bar,
];

const COLORS: [(&str, [f64; 3]); 2] = [("warm", [0.92, 0.36, 0.18]), ("cool", [0.18, 0.52, 0.94])];

pub const MAX_CLASSES: usize = SHAPES.len() * COLORS.len();

/// Shape and colour index of class `k`. Colours alternate so that both
/// attributes are needed to tell classes apart.
pub fn class_spec(k: usize) -> (ShapeKind, usize) {
    let shape = SHAPES[k % SHAPES.len()];
    let color = (k / SHAPES.len() + k) % COLORS.len();
    (shape, color)
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|k| {
            let (shape, color) = class_spec(k);
            format!("{}-{}", COLORS[color].0, format!("{shape:?}").to_lowercase())
        })
        .collect()
}

impl ShapeKind {
    /// Whether the point `(dx, dy)` relative to the centre lies inside a shape
    /// of bounding size `size`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let half = size / 2.0;
        let r = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::Circle => r <= half,
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Triangle => dy.abs() <= half && dx.abs() <= (dy + half) / 2.0,
            ShapeKind::Cross => {
                let arm = size / 6.0;
                (dx.abs() <= arm && dy.abs() <= half) || (dy.abs() <= arm && dx.abs() <= half)
            }
            ShapeKind::Ring => r <= half && r >= half / 2.0,
            ShapeKind::Bar => dx.abs() <= half && dy.abs() <= size / 6.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

/// Generator settings for both splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetParams {
    pub n_train: usize,
    pub n_test: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of object bounding sizes, in pixels.
    pub size_range: [usize; 2],
    pub objects_per_image: [usize; 2],
    /// Target fraction of objects with more than 30% of their pixels overdrawn.
    pub occlusion_target: f64,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 500,
            num_classes: 8,
            height: 64,
            width: 64,
            size_range: [6, 22],
            objects_per_image: [1, 4],
            occlusion_target: 0.3,
            seed: 0,
        }
    }
}

impl DatasetParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("dataset: {m}")));
        if self.n_train == 0 || self.n_test == 0 {
            return bad(format!("n_train ({}) and n_test ({}) must be positive", self.n_train, self.n_test));
        }
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return bad(format!("num_classes {} outside 1..={MAX_CLASSES}", self.num_classes));
        }
        if self.height < 8 || self.width < 8 {
            return bad(format!("canvas {}x{} smaller than 8x8", self.height, self.width));
        }
        let [smin, smax] = self.size_range;
        if smin < 3 || smin > smax {
            return bad(format!("size_range {:?} must satisfy 3 <= min <= max", self.size_range));
        }
        if smax > self.height.min(self.width) {
            return bad(format!("largest object size {smax} exceeds the canvas"));
        }
        let [lo, hi] = self.objects_per_image;
        if lo == 0 || lo > hi {
            return bad(format!("objects_per_image {:?} must satisfy 1 <= min <= max", self.objects_per_image));
        }
        if !(0.0..=1.0).contains(&self.occlusion_target) {
            return bad(format!("occlusion_target {} outside [0, 1]", self.occlusion_target));
        }
        self.occluder_probability().map(|_| ())
    }

    /// Probability that a non-last object gets a deliberate occluder, chosen so
    /// the expected fraction of occluded objects equals `occlusion_target`.
    fn occluder_probability(&self) -> Result<f64> {
        let [lo, hi] = self.objects_per_image;
        let mean_objects = (lo + hi) as f64 / 2.0;
        let mean_occludable = mean_objects - 1.0;
        if self.occlusion_target == 0.0 {
            return Ok(0.0);
        }
        let r = self.occlusion_target * mean_objects / mean_occludable;
        if mean_occludable <= 0.0 || r > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "dataset: occlusion_target {} unreachable with {:?} objects per image",
                self.occlusion_target, self.objects_per_image
            )));
        }
        Ok(r)
    }

    /// Small-object threshold scaled to this canvas.
    pub fn small_threshold(&self) -> f64 {
        SMALL_OBJECT_PX * self.width.min(self.height) as f64 / 64.0
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectMeta {
    pub class_id: usize,
    /// Bounding size in pixels.
    pub size: usize,
    pub occlusion_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor,
    pub labels: Vec<u8>,
    pub objects: Vec<ObjectMeta>,
}

impl Sample {
    pub fn has_small_object(&self, threshold: f64) -> bool {
        self.objects.iter().any(|o| o.size as f64 <= threshold)
    }

    pub fn has_occluded_object(&self) -> bool {
        self.objects.iter().any(|o| o.occlusion_fraction > OCCLUDED_FRACTION)
    }
}

/// First line of every manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub split: Split,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<DatasetParams>,
}

/// One image of a manifest. External datasets may omit `objects`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    /// Image path relative to the dataset directory.
    pub image: String,
    pub labels: Vec<u8>,
    #[serde(default)]
    pub objects: Vec<ObjectMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ManifestLine {
    Header(ManifestHeader),
    Sample(SampleRecord),
}

/// A loaded split: header plus decoded samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: ManifestHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.header.num_classes
    }

    pub fn small_threshold(&self) -> f64 {
        SMALL_OBJECT_PX * self.header.width.min(self.header.height) as f64 / 64.0
    }

    /// Subset of samples by index, keeping the header.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn summary(&self) -> DatasetSummary {
        let t = self.small_threshold();
        DatasetSummary {
            split: self.header.split,
            images: self.len(),
            num_classes: self.num_classes(),
            objects: self.samples.iter().map(|s| s.objects.len()).sum(),
            small_images: self.samples.iter().filter(|s| s.has_small_object(t)).count(),
            occluded_images: self.samples.iter().filter(|s| s.has_occluded_object()).count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub split: Split,
    pub images: usize,
    pub num_classes: usize,
    pub objects: usize,
    pub small_images: usize,
    pub occluded_images: usize,
}

struct Placed {
    class_id: usize,
    size: usize,
    pixels: Vec<usize>,
}

fn rasterize(shape: ShapeKind, cx: f64, cy: f64, size: usize, h: usize, w: usize) -> Vec<usize> {
    let half = size as f64 / 2.0 + 1.0;
    let y0 = (cy - half).floor().max(0.0) as usize;
    let y1 = ((cy + half).ceil() as usize).min(h);
    let x0 = (cx - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(w);
    let mut out = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size as f64) {
                out.push(y * w + x);
            }
        }
    }
    out
}

fn overlap(a: &[usize], covered: &[bool]) -> usize {
    a.iter().filter(|&&p| covered[p]).count()
}

/// Generates one image deterministically from its own rng stream.
fn generate_sample(params: &DatasetParams, split: Split, index: usize, occluder_p: f64) -> Sample {
    let (h, w) = (params.height, params.width);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream((split.stream() << 40) | index as u64);

    let n_objects = rng.gen_range(params.objects_per_image[0]..=params.objects_per_image[1]);
    let wants_occluder: Vec<bool> = (0..n_objects)
        .map(|i| i + 1 < n_objects && rng.gen_bool(occluder_p))
        .collect();

    let [smin, smax] = params.size_range;
    let mut placed: Vec<Placed> = Vec::with_capacity(n_objects);
    for j in 0..n_objects {
        let occluding = j > 0 && wants_occluder[j - 1];
        // Visible pixels this one must not touch; pixels of the object being
        // occluded are fair game even where they hide something older.
        let mut top = vec![usize::MAX; h * w];
        for (i, p) in placed.iter().enumerate() {
            p.pixels.iter().for_each(|&px| top[px] = i);
        }
        let avoid: Vec<bool> = top
            .iter()
            .map(|&o| o != usize::MAX && !(occluding && o == j - 1))
            .collect();
        let mut target = vec![false; h * w];
        if occluding {
            placed[j - 1].pixels.iter().for_each(|&i| target[i] = true);
        }

        let rounds = if occluding { OCCLUDER_ROUNDS } else { 1 };
        let mut best: Option<(f64, Placed)> = None;
        for _ in 0..rounds {
            let class_id = rng.gen_range(0..params.num_classes);
            let shape = class_spec(class_id).0;
            let lo = if occluding { smin.max(placed[j - 1].size * 3 / 4).min(smax) } else { smin };
            let size = rng.gen_range(lo..=smax);
            let half = size as f64 / 2.0;
            for _ in 0..PLACEMENT_ATTEMPTS {
                let cx = rng.gen_range(half..=(w as f64 - half));
                let cy = rng.gen_range(half..=(h as f64 - half));
                let pixels = rasterize(shape, cx, cy, size, h, w);
                if pixels.is_empty() {
                    continue;
                }
                // Distance from an acceptable placement; zero means accept.
                let mut penalty = overlap(&pixels, &avoid) as f64;
                if occluding {
                    let frac = overlap(&pixels, &target) as f64 / placed[j - 1].pixels.len() as f64;
                    penalty += (OCCLUSION_BAND[0] - frac).max(0.0) + (frac - OCCLUSION_BAND[1]).max(0.0);
                }
                if best.as_ref().is_none_or(|(b, _)| penalty < *b) {
                    best = Some((penalty, Placed { class_id, size, pixels }));
                }
                if penalty == 0.0 {
                    break;
                }
            }
            if best.as_ref().is_some_and(|(b, _)| *b == 0.0) {
                break;
            }
            if best.is_none() {
                let c = (w as f64 / 2.0, h as f64 / 2.0);
                best = Some((f64::INFINITY, Placed { class_id, size, pixels: rasterize(shape, c.0, c.1, size, h, w) }));
            }
        }
        placed.push(best.expect("at least one round").1);
    }

    // Paint in z-order; the owner map drives the occlusion metadata.
    let mut owner = vec![usize::MAX; h * w];
    for (i, p) in placed.iter().enumerate() {
        p.pixels.iter().for_each(|&px| owner[px] = i);
    }

    let base = rng.gen_range(0.12..0.42);
    let mut rgb = vec![0u8; 3 * h * w];
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for px in 0..h * w {
        let g = base + rng.gen_range(-0.06..0.06);
        for c in 0..3 {
            rgb[c * h * w + px] = quant(g);
        }
    }
    for p in &placed {
        let (_, color) = class_spec(p.class_id);
        let tint: Vec<f64> = COLORS[color]
            .1
            .iter()
            .map(|&v| v + rng.gen_range(-0.08..0.08))
            .collect();
        for &px in &p.pixels {
            for c in 0..3 {
                rgb[c * h * w + px] = quant(tint[c] + rng.gen_range(-0.03..0.03));
            }
        }
    }

    let mut labels = vec![0u8; params.num_classes];
    let objects = placed
        .iter()
        .enumerate()
        .map(|(i, p)| {
            labels[p.class_id] = 1;
            let hidden = p.pixels.iter().filter(|&&px| owner[px] != i).count();
            ObjectMeta {
                class_id: p.class_id,
                size: p.size,
                occlusion_fraction: hidden as f64 / p.pixels.len() as f64,
            }
        })
        .collect();

    Sample {
        id: format!("{}_{index:05}", split.name()),
        image: planar_to_tensor(&rgb, h, w),
        labels,
        objects,
    }
}

fn planar_to_tensor(rgb: &[u8], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![3, h, w], rgb.iter().map(|&b| b as f64 / 255.0).collect()).expect("3*h*w values")
}

/// Generates one split in memory.
pub fn generate_split(params: &DatasetParams, split: Split) -> Result<Dataset> {
    params.validate()?;
    let r = params.occluder_probability()?;
    let samples = (0..params.count(split))
        .map(|i| generate_sample(params, split, i, r))
        .collect();
    Ok(Dataset {
        header: ManifestHeader {
            num_classes: params.num_classes,
            class_names: class_names(params.num_classes),
            split,
            height: params.height,
            width: params.width,
            seed: Some(params.seed),
            params: Some(params.clone()),
        },
        samples,
    })
}

pub fn manifest_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

fn image_bytes(t: &Tensor) -> (u32, u32, Vec<u8>) {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(3 * plane);
    for px in 0..plane {
        for c in 0..3 {
            out.push((t.data()[c * plane + px] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    (w as u32, h as u32, out)
}

/// Writes `images/*.png` and the split manifest into `dir`.
pub fn write_split(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join(manifest_file(dataset.header.split));
    let mut out = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut write_line = |line: &ManifestLine| {
        let text = serde_json::to_string(line).expect("serializable");
        writeln!(out, "{text}").map_err(|e| Error::io(&path, e))
    };
    write_line(&ManifestLine::Header(dataset.header.clone()))?;
    for s in &dataset.samples {
        let rel = format!("images/{}.png", s.id);
        let (w, h, bytes) = image_bytes(&s.image);
        let img_path = dir.join(&rel);
        image::RgbImage::from_raw(w, h, bytes)
            .expect("buffer matches dimensions")
            .save(&img_path)
            .map_err(|e| Error::Image { path: img_path.clone(), source: e })?;
        write_line(&ManifestLine::Sample(SampleRecord {
            id: s.id.clone(),
            image: rel,
            labels: s.labels.clone(),
            objects: s.objects.clone(),
        }))?;
    }
    Ok(())
}

/// Generates and writes both splits.
pub fn generate_dataset(params: &DatasetParams, dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = generate_split(params, Split::Train)?;
    let test = generate_split(params, Split::Test)?;
    write_split(&train, dir)?;
    write_split(&test, dir)?;
    Ok((train, test))
}

/// Reads a split manifest and decodes its images.
///
/// Images whose size differs from the header are rejected rather than resized.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let path = dir.join(manifest_file(split));
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let what = path.display().to_string();
    let mut header: Option<ManifestHeader> = None;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::format(&what, format!("line {}: {e}", i + 1)))?;
        match (parsed, &header) {
            (ManifestLine::Header(h), None) => {
                if h.class_names.len() != h.num_classes {
                    return Err(Error::format(&what, "class_names length differs from num_classes"));
                }
                header = Some(h);
            }
            (ManifestLine::Header(_), Some(_)) => {
                return Err(Error::format(&what, format!("line {}: second header", i + 1)))
            }
            (ManifestLine::Sample(_), None) => return Err(Error::format(&what, "sample before header")),
            (ManifestLine::Sample(rec), Some(h)) => samples.push(load_record(dir, h, rec, &what)?),
        }
    }
    let header = header.ok_or_else(|| Error::format(&what, "missing header"))?;
    if samples.is_empty() {
        return Err(Error::Empty(format!("manifest {what}")));
    }
    Ok(Dataset { header, samples })
}

fn load_record(dir: &Path, h: &ManifestHeader, rec: SampleRecord, what: &str) -> Result<Sample> {
    if rec.labels.len() != h.num_classes || rec.labels.iter().any(|&v| v > 1) {
        return Err(Error::format(
            what,
            format!("{}: label vector must be {} values in {{0,1}}", rec.id, h.num_classes),
        ));
    }
    if let Some(o) = rec.objects.iter().find(|o| o.class_id >= h.num_classes) {
        return Err(Error::format(what, format!("{}: object class {} out of range", rec.id, o.class_id)));
    }
    let img_path = dir.join(&rec.image);
    let img = image::open(&img_path)
        .map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?
        .into_rgb8();
    if img.width() as usize != h.width || img.height() as usize != h.height {
        return Err(Error::format(
            what,
            format!(
                "{}: image is {}x{}, manifest says {}x{}",
                rec.id,
                img.width(),
                img.height(),
                h.width,
                h.height
            ),
        ));
    }
    let plane = h.width * h.height;
    let mut planar = vec![0u8; 3 * plane];
    for (px, rgb) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * plane + px] = rgb.0[c];
        }
    }
    Ok(Sample {
        id: rec.id,
        image: planar_to_tensor(&planar, h.height, h.width),
        labels: rec.labels,
        objects: rec.objects,
    })
}

/// Random flip and resize-crop parameters for one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentChoice {
    pub flip: bool,
    pub crop_top: usize,
    pub crop_left: usize,
    pub crop_height: usize,
    pub crop_width: usize,
}

impl AugmentChoice {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            flip: false,
            crop_top: 0,
            crop_left: 0,
            crop_height: height,
            crop_width: width,
        }
    }
}

pub const CROP_SCALE: [f64; 2] = [0.7, 1.0];

/// Flip with probability 1/2; square-aspect crop whose side is a uniform
/// fraction in `[0.7, 1.0]` of the image side, at a uniform position.
pub fn draw_augment(height: usize, width: usize, rng: &mut impl Rng) -> AugmentChoice {
    let flip = rng.gen_bool(0.5);
    let scale = rng.gen_range(CROP_SCALE[0]..=CROP_SCALE[1]);
    let crop_height = ((height as f64 * scale).round() as usize).clamp(1, height);
    let crop_width = ((width as f64 * scale).round() as usize).clamp(1, width);
    AugmentChoice {
        flip,
        crop_top: rng.gen_range(0..=height - crop_height),
        crop_left: rng.gen_range(0..=width - crop_width),
        crop_height,
        crop_width,
    }
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, s - lo as f64)
}

/// Crops `[C,H,W]`, resizes back to `H x W` bilinearly, then optionally mirrors.
pub fn apply_augment(image: &Tensor, choice: &AugmentChoice) -> Tensor {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    let cols: Vec<_> = (0..w).map(|x| source_coord(x, choice.crop_width, w)).collect();
    for y in 0..h {
        let (y0, y1, fy) = source_coord(y, choice.crop_height, h);
        let (r0, r1) = (choice.crop_top + y0, choice.crop_top + y1);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let (c0, c1) = (choice.crop_left + x0, choice.crop_left + x1);
                let top = plane[r0 * w + c0] * (1.0 - fx) + plane[r0 * w + c1] * fx;
                let bottom = plane[r1 * w + c0] * (1.0 - fx) + plane[r1 * w + c1] * fx;
                let dx = if choice.flip { w - 1 - x } else { x };
                out[ch * h * w + y * w + dx] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Training-time augmentation. Labels and metadata are carried over unchanged.
pub fn augment(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let s = sample.image.shape();
    let choice = draw_augment(s[1], s[2], rng);
    Sample {
        image: apply_augment(&sample.image, &choice),
        ..sample.clone()
    }
}

/// Index batches covering `0..n` once, shuffled deterministically per `(seed, epoch)`.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::Empty("dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks images `[N,3,H,W]` and labels `[N,K]` for the given samples.
pub fn stack_batch<'a>(samples: impl IntoIterator<Item = (&'a Tensor, &'a [u8])>) -> Result<(Tensor, Tensor)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut k = 0;
    let mut n = 0;
    for (img, lab) in samples {
        match &shape {
            None => {
                shape = Some(img.shape().to_vec());
                k = lab.len();
            }
            Some(s) if s.as_slice() != img.shape() || lab.len() != k => {
                return Err(Error::shape("stack_batch", "samples differ in image or label shape"))
            }
            Some(_) => {}
        }
        images.extend_from_slice(img.data());
        labels.extend(lab.iter().map(|&v| v as f64));
        n += 1;
    }
    let s = shape.ok_or_else(|| Error::Empty("batch".into()))?;
    Ok((
        Tensor::new([vec![n], s].concat(), images)?,
        Tensor::new(vec![n, k], labels)?,
    ))
}

/// Iterates `(images, labels)` batches of a dataset for one epoch, without augmentation.
pub fn batch_iter(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<impl Iterator<Item = Result<(Tensor, Tensor)>> + '_> {
    let batches = batch_indices(dataset.len(), batch_size, seed, epoch)?;
    Ok(batches.into_iter().map(move |idx| {
        stack_batch(idx.iter().map(|&i| {
            let s = &dataset.samples[i];
            (&s.image, s.labels.as_slice())
        }))
    }))
}
