//! Irregular binary masks: procedural generation, high/low partitioning,
//! application to images, and on-disk mask directories.
//!
//! Mask values follow the "0 = removed pixel" convention, so the percentage
//! of zero pixels `p` is exactly the fraction of the image a mask hides.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Masks hiding strictly more than this percentage of pixels are "high".
pub const HIGH_MASK_THRESHOLD: f64 = 50.0;

pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Largest heading change between consecutive stroke segments, in radians.
const MAX_TURN: f64 = 2.0 * std::f64::consts::PI / 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    High,
    Low,
}

impl Subset {
    pub fn classify(p: f64) -> Self {
        if p > HIGH_MASK_THRESHOLD {
            Subset::High
        } else {
            Subset::Low
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Subset::High => "high",
            Subset::Low => "low",
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Subset::High),
            "low" => Ok(Subset::Low),
            other => Err(Error::InvalidArgument(format!("unknown mask subset {other:?}"))),
        }
    }
}

/// Soft-edged mask straight out of the generator, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// A binarized mask with its zero-pixel percentage and subset tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    grid: Vec<u8>,
    p: f64,
    subset: Subset,
}

impl Mask {
    /// Wraps a `{0,1}` grid, computing `p` and the subset.
    pub fn from_grid(height: usize, width: usize, grid: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || grid.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} grid needs {} values, got {}", height * width, grid.len()),
            ));
        }
        if let Some(v) = grid.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask values must be 0 or 1, found {v}")));
        }
        let zeros = grid.iter().filter(|&&v| v == 0).count();
        let p = 100.0 * zeros as f64 / grid.len() as f64;
        Ok(Self {
            height,
            width,
            grid,
            p,
            subset: Subset::classify(p),
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self::from_grid(height, width, vec![1; height * width]).expect("valid grid")
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_grid(height, width, vec![0; height * width]).expect("valid grid")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[u8] {
        &self.grid
    }

    /// Percentage of zero pixels.
    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn subset(&self) -> Subset {
        self.subset
    }

    pub fn zero_count(&self) -> usize {
        self.grid.iter().filter(|&&v| v == 0).count()
    }
}

/// Inclusive `[lo, hi]` range.
pub type Span<T> = [T; 2];

/// Knobs for the stroke-and-hole mask generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskGenParams {
    pub strokes: Span<usize>,
    /// Segments per stroke.
    pub stroke_vertices: Span<usize>,
    pub step_length: Span<f64>,
    pub brush_width: Span<f64>,
    pub holes: Span<usize>,
    pub hole_radius: Span<f64>,
}

impl Default for MaskGenParams {
    fn default() -> Self {
        Self {
            strokes: [1, 6],
            stroke_vertices: [2, 6],
            step_length: [6.0, 20.0],
            brush_width: [4.0, 12.0],
            holes: [0, 4],
            hole_radius: [4.0, 16.0],
        }
    }
}

impl MaskGenParams {
    /// Generator that never removes anything.
    pub fn empty() -> Self {
        Self {
            strokes: [0, 0],
            holes: [0, 0],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn span<T: PartialOrd + std::fmt::Debug>(name: &str, s: &Span<T>) -> Result<()> {
            if s[0] > s[1] {
                return Err(Error::InvalidConfig(format!("mask {name} range {s:?} is empty")));
            }
            Ok(())
        }
        span("strokes", &self.strokes)?;
        span("stroke_vertices", &self.stroke_vertices)?;
        span("step_length", &self.step_length)?;
        span("brush_width", &self.brush_width)?;
        span("holes", &self.holes)?;
        span("hole_radius", &self.hole_radius)?;
        if self.stroke_vertices[0] == 0 {
            return Err(Error::InvalidConfig("mask strokes need at least one segment".into()));
        }
        let positive = [
            self.step_length[0],
            self.brush_width[0],
            self.hole_radius[0],
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || !self.hole_radius[1].is_finite() {
            return Err(Error::InvalidConfig(
                "mask step length, brush width and hole radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn uniform_usize(rng: &mut impl Rng, s: Span<usize>) -> usize {
    rng.gen_range(s[0]..=s[1])
}

fn uniform_f64(rng: &mut impl Rng, s: Span<f64>) -> f64 {
    if s[0] == s[1] {
        s[0]
    } else {
        rng.gen_range(s[0]..=s[1])
    }
}

struct Canvas {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Canvas {
    /// Lowers every pixel in the clipped box to `1 - coverage(px, py)`.
    fn erase(&mut self, bbox: [f64; 4], coverage: impl Fn(f64, f64) -> f64) {
        let x0 = bbox[0].floor().max(0.0) as usize;
        let y0 = bbox[1].floor().max(0.0) as usize;
        let x1 = (bbox[2].ceil().max(0.0) as usize).min(self.width);
        let y1 = (bbox[3].ceil().max(0.0) as usize).min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                let c = coverage(x as f64 + 0.5, y as f64 + 0.5).clamp(0.0, 1.0);
                let v = &mut self.values[y * self.width + x];
                *v = v.min(1.0 - c);
            }
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), brush: f64) {
        let half = brush / 2.0;
        let pad = half + 1.0;
        let bbox = [
            a.0.min(b.0) - pad,
            a.1.min(b.1) - pad,
            a.0.max(b.0) + pad,
            a.1.max(b.1) + pad,
        ];
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        self.erase(bbox, |px, py| {
            let t = if len2 > 0.0 {
                (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
            let d = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
            half + 0.5 - d
        });
    }

    fn ellipse(&mut self, center: (f64, f64), rx: f64, ry: f64, angle: f64) {
        let reach = rx.max(ry) + 1.0;
        let bbox = [center.0 - reach, center.1 - reach, center.0 + reach, center.1 + reach];
        let (sin, cos) = angle.sin_cos();
        let rmin = rx.min(ry);
        self.erase(bbox, |px, py| {
            let (ox, oy) = (px - center.0, py - center.1);
            let u = ox * cos + oy * sin;
            let v = -ox * sin + oy * cos;
            let r = ((u / rx).powi(2) + (v / ry).powi(2)).sqrt();
            (1.0 - r) * rmin + 0.5
        });
    }
}

/// Draws random-walk strokes and elliptical holes on an all-ones canvas.
pub fn generate_irregular_mask_with(
    height: usize,
    width: usize,
    params: &MaskGenParams,
    rng: &mut impl Rng,
) -> Result<GrayMask> {
    if height < 8 || width < 8 {
        return Err(Error::InvalidArgument(format!(
            "mask canvas must be at least 8x8, got {height}x{width}"
        )));
    }
    params.validate()?;
    let mut canvas = Canvas {
        height,
        width,
        values: vec![1.0; height * width],
    };
    let (h, w) = (height as f64, width as f64);

    for _ in 0..uniform_usize(rng, params.strokes) {
        let mut pos = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
        let brush = uniform_f64(rng, params.brush_width);
        for _ in 0..uniform_usize(rng, params.stroke_vertices) {
            heading += rng.gen_range(-MAX_TURN..=MAX_TURN);
            let step = uniform_f64(rng, params.step_length);
            let next = (
                (pos.0 + step * heading.cos()).clamp(0.0, w),
                (pos.1 + step * heading.sin()).clamp(0.0, h),
            );
            canvas.segment(pos, next, brush);
            pos = next;
        }
    }
    for _ in 0..uniform_usize(rng, params.holes) {
        let center = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let rx = uniform_f64(rng, params.hole_radius);
        let ry = uniform_f64(rng, params.hole_radius);
        let angle = rng.gen_range(0.0..std::f64::consts::PI);
        canvas.ellipse(center, rx, ry, angle);
    }
    Ok(GrayMask {
        height,
        width,
        values: canvas.values,
    })
}

pub fn generate_irregular_mask(height: usize, width: usize, params: &MaskGenParams, seed: u64) -> Result<GrayMask> {
    generate_irregular_mask_with(height, width, params, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Thresholds a gray mask: values `>= threshold` are kept (1), the rest removed (0).
pub fn binarize(raw: &GrayMask, threshold: f64) -> Result<Mask> {
    if let Some(v) = raw.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("gray mask value {v} outside [0, 1]")));
    }
    let grid = raw.values.iter().map(|&v| u8::from(v >= threshold)).collect();
    Mask::from_grid(raw.height, raw.width, grid)
}

/// The two mask pools used for training and robustness evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskSubsets {
    pub high: Vec<Mask>,
    pub low: Vec<Mask>,
}

impl MaskSubsets {
    pub fn get(&self, which: Subset) -> &[Mask] {
        match which {
            Subset::High => &self.high,
            Subset::Low => &self.low,
        }
    }

    fn get_mut(&mut self, which: Subset) -> &mut Vec<Mask> {
        match which {
            Subset::High => &mut self.high,
            Subset::Low => &mut self.low,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mask> {
        self.high.iter().chain(&self.low)
    }
}

/// Attempts allowed per requested mask before `build_subsets` gives up.
pub const DEFAULT_OVERSAMPLING: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetConfig {
    pub count_per_subset: usize,
    pub height: usize,
    pub width: usize,
    pub threshold: f64,
    pub oversampling: usize,
    pub seed: u64,
    pub generator: MaskGenParams,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        Self {
            count_per_subset: 1000,
            height: 64,
            width: 64,
            threshold: DEFAULT_BINARIZE_THRESHOLD,
            oversampling: DEFAULT_OVERSAMPLING,
            seed: 0,
            generator: MaskGenParams::default(),
        }
    }
}

/// Generates masks until both subsets hold `count_per_subset` members.
///
/// Masks landing in an already full subset are discarded.
pub fn build_subsets(cfg: &SubsetConfig) -> Result<MaskSubsets> {
    if cfg.count_per_subset == 0 {
        return Err(Error::InvalidConfig("count_per_subset must be at least 1".into()));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "binarization threshold {} outside (0, 1]",
            cfg.threshold
        )));
    }
    let budget = cfg.oversampling.max(1) * 2 * cfg.count_per_subset;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subsets = MaskSubsets::default();
    let full = |s: &MaskSubsets, which| s.get(which).len() >= cfg.count_per_subset;
    for _ in 0..budget {
        if full(&subsets, Subset::High) && full(&subsets, Subset::Low) {
            break;
        }
        let raw = generate_irregular_mask_with(cfg.height, cfg.width, &cfg.generator, &mut rng)?;
        let mask = binarize(&raw, cfg.threshold)?;
        let which = mask.subset();
        if !full(&subsets, which) {
            subsets.get_mut(which).push(mask);
        }
    }
    for which in [Subset::High, Subset::Low] {
        let have = subsets.get(which).len();
        if have < cfg.count_per_subset {
            return Err(Error::Budget(format!(
                "{which} subset has {have} of {} masks after {budget} attempts",
                cfg.count_per_subset
            )));
        }
    }
    Ok(subsets)
}

/// Uniformly draws one mask from a subset.
pub fn sample_mask<'a>(subsets: &'a MaskSubsets, which: Subset, rng: &mut impl Rng) -> Result<&'a Mask> {
    let pool = subsets.get(which);
    if pool.is_empty() {
        return Err(Error::Empty(format!("{which} mask subset")));
    }
    Ok(&pool[rng.gen_range(0..pool.len())])
}

/// `image[C,H,W] * mask[H,W]`, the same mask on every channel.
pub fn apply_mask(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[1] != mask.height || s[2] != mask.width {
        return Err(Error::shape(
            "apply_mask",
            format!("image {s:?} vs mask {}x{}", mask.height, mask.width),
        ));
    }
    let plane = mask.height * mask.width;
    let mut out = image.clone();
    for chan in out.data_mut().chunks_exact_mut(plane) {
        for (v, &m) in chan.iter_mut().zip(&mask.grid) {
            if m == 0 {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}

/// Masks every image of an `[N,C,H,W]` batch with its own mask.
pub fn apply_mask_batch(images: &Tensor, masks: &[&Mask]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[0] != masks.len() {
        return Err(Error::shape(
            "apply_mask_batch",
            format!("batch {s:?} with {} masks", masks.len()),
        ));
    }
    let per = s[1] * s[2] * s[3];
    let mut data = Vec::with_capacity(images.len());
    for (chunk, mask) in images.data().chunks_exact(per).zip(masks) {
        let img = Tensor::new(vec![s[1], s[2], s[3]], chunk.to_vec())?;
        data.extend(apply_mask(&img, mask)?.into_data());
    }
    Tensor::new(s.to_vec(), data)
}

/// One line of a mask directory's `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecord {
    pub file: String,
    pub p: f64,
    pub subset: Subset,
}

pub const MASK_MANIFEST: &str = "manifest.jsonl";

/// Writes `high/` and `low/` PNGs (0 or 255) plus `manifest.jsonl`.
pub fn save_subsets(subsets: &MaskSubsets, dir: &Path) -> Result<Vec<MaskRecord>> {
    let mut records = Vec::new();
    for which in [Subset::High, Subset::Low] {
        let sub = dir.join(which.name());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for (i, mask) in subsets.get(which).iter().enumerate() {
            let file = format!("{}/{i:05}.png", which.name());
            let path = dir.join(&file);
            let pixels = mask.grid.iter().map(|&v| v * 255).collect();
            image::GrayImage::from_raw(mask.width as u32, mask.height as u32, pixels)
                .expect("buffer matches dimensions")
                .save(&path)
                .map_err(|e| Error::Image { path: path.clone(), source: e })?;
            records.push(MaskRecord {
                file,
                p: mask.p,
                subset: which,
            });
        }
    }
    let manifest = dir.join(MASK_MANIFEST);
    let mut out = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(out, "{line}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(records)
}

/// Nearest-neighbour resize of an 8-bit gray image, then binarize at 128.
fn mask_from_gray(img: &image::GrayImage, height: usize, width: usize) -> Result<Mask> {
    let (sw, sh) = (img.width() as usize, img.height() as usize);
    let mut grid = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = ((y * 2 + 1) * sh / (2 * height)).min(sh - 1);
        for x in 0..width {
            let sx = ((x * 2 + 1) * sw / (2 * width)).min(sw - 1);
            grid.push(u8::from(img.get_pixel(sx as u32, sy as u32).0[0] >= 128));
        }
    }
    Mask::from_grid(height, width, grid)
}

fn read_gray(path: &Path) -> Result<image::GrayImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .into_luma8())
}

fn png_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            png_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Loads a mask directory at `height x width`.
///
/// With a `manifest.jsonl` the listed files are read in order; otherwise every
/// PNG below `dir` is used (e.g. an external irregular-mask collection). Each
/// mask is classified from its own pixels after resizing.
pub fn load_subsets(dir: &Path, height: usize, width: usize) -> Result<MaskSubsets> {
    let manifest = dir.join(MASK_MANIFEST);
    let files = if manifest.exists() {
        let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut files = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&manifest, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: MaskRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format("mask manifest", format!("line {}: {e}", i + 1)))?;
            files.push(dir.join(rec.file));
        }
        files
    } else {
        let mut files = Vec::new();
        png_files(dir, &mut files)?;
        files
    };
    let mut subsets = MaskSubsets::default();
    for path in files {
        let mask = mask_from_gray(&read_gray(&path)?, height, width)?;
        subsets.get_mut(mask.subset()).push(mask);
    }
    if subsets.high.is_empty() && subsets.low.is_empty() {
        return Err(Error::Empty(format!("mask directory {}", dir.display())));
    }
    Ok(subsets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_strokes_no_holes_is_all_ones() {
        let raw = generate_irregular_mask(16, 16, &MaskGenParams::empty(), 3).unwrap();
        assert!(raw.values.iter().all(|&v| v == 1.0));
        let m = binarize(&raw, 0.5).unwrap();
        assert_eq!(m.p(), 0.0);
        assert_eq!(m.subset(), Subset::Low);
    }

    #[test]
    fn full_canvas_hole_is_all_zeros() {
        let params = MaskGenParams {
            strokes: [0, 0],
            holes: [1, 1],
            hole_radius: [200.0, 200.0],
            ..Default::default()
        };
        let m = binarize(&generate_irregular_mask(32, 32, &params, 9).unwrap(), 0.5).unwrap();
        assert_eq!(m.p(), 100.0);
        assert_eq!(m.subset(), Subset::High);
    }

    #[test]
    fn generator_is_deterministic() {
        let p = MaskGenParams::default();
        assert_eq!(
            generate_irregular_mask(64, 64, &p, 42).unwrap(),
            generate_irregular_mask(64, 64, &p, 42).unwrap()
        );
        assert_ne!(
            generate_irregular_mask(64, 64, &p, 42).unwrap(),
            generate_irregular_mask(64, 64, &p, 43).unwrap()
        );
    }

    #[test]
    fn generator_rejects_bad_input() {
        assert!(generate_irregular_mask(4, 64, &MaskGenParams::default(), 0).is_err());
        let p = MaskGenParams {
            holes: [3, 1],
            ..Default::default()
        };
        assert!(generate_irregular_mask(64, 64, &p, 0).is_err());
    }

    #[test]
    fn binarize_keeps_soft_mask_values_above_threshold() {
        let raw = GrayMask {
            height: 1,
            width: 3,
            values: vec![0.884, 0.5, 0.4999],
        };
        assert_eq!(binarize(&raw, 0.5).unwrap().grid(), &[1, 1, 0]);

        let uniform = GrayMask {
            height: 4,
            width: 4,
            values: vec![0.4; 16],
        };
        assert_eq!(binarize(&uniform, 0.5).unwrap().p(), 100.0);

        let bad = GrayMask {
            height: 1,
            width: 1,
            values: vec![1.5],
        };
        assert!(binarize(&bad, 0.5).is_err());
    }

    #[test]
    fn p_of_2458_zeros_on_64x64() {
        let mut grid = vec![1u8; 4096];
        grid[..2458].fill(0);
        let m = Mask::from_grid(64, 64, grid).unwrap();
        assert_eq!(m.p(), 100.0 * 2458.0 / 4096.0);
        assert!((m.p() - 60.01).abs() < 0.005);
        assert_eq!(m.subset(), Subset::High);
    }

    #[test]
    fn exactly_half_goes_to_low() {
        let mut grid = vec![1u8; 64];
        grid[..32].fill(0);
        let m = Mask::from_grid(8, 8, grid).unwrap();
        assert_eq!(m.p(), 50.0);
        assert_eq!(m.subset(), Subset::Low);
    }

    #[test]
    fn trivial_generator_fails_to_fill_high() {
        let cfg = SubsetConfig {
            count_per_subset: 1,
            height: 16,
            width: 16,
            generator: MaskGenParams::empty(),
            ..Default::default()
        };
        let err = build_subsets(&cfg).unwrap_err();
        assert!(matches!(err, Error::Budget(ref m) if m.contains("high")), "{err}");
    }

    #[test]
    fn sampling_empty_subset_is_an_error() {
        let subsets = MaskSubsets::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(&subsets, Subset::High, &mut rng).is_err());
    }

    #[test]
    fn singleton_subset_always_returns_it() {
        let subsets = MaskSubsets {
            high: vec![Mask::zeros(8, 8)],
            low: vec![],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(sample_mask(&subsets, Subset::High, &mut rng).unwrap(), &subsets.high[0]);
        }
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let img = Tensor::from_fn(vec![3, 8, 8], |i| 0.1 + (i % 9) as f64 / 10.0);
        assert_eq!(apply_mask(&img, &Mask::ones(8, 8)).unwrap(), img);
        let zero = apply_mask(&img, &Mask::zeros(8, 8)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(apply_mask(&img, &Mask::ones(8, 7)).is_err());
    }

    #[test]
    fn half_mask_on_uniform_image() {
        let img = Tensor::full(vec![3, 8, 8], 0.5);
        let grid = (0..64).map(|i| (i % 2) as u8).collect();
        let mask = Mask::from_grid(8, 8, grid).unwrap();
        assert_eq!(mask.p(), 50.0);
        let out = apply_mask(&img, &mask).unwrap();
        for chan in out.data().chunks_exact(64) {
            assert_eq!(chan.iter().filter(|&&v| v == 0.5).count(), 32);
            assert_eq!(chan.iter().filter(|&&v| v == 0.0).count(), 32);
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SubsetConfig {
            count_per_subset: 5,
            seed: 4,
            ..Default::default()
        };
        let subsets = build_subsets(&cfg).unwrap();
        let records = save_subsets(&subsets, dir.path()).unwrap();
        assert_eq!(records.len(), 10);
        let loaded = load_subsets(dir.path(), 64, 64).unwrap();
        assert_eq!(loaded, subsets);

        fs::remove_file(dir.path().join(MASK_MANIFEST)).unwrap();
        let scanned = load_subsets(dir.path(), 32, 32).unwrap();
        assert_eq!(scanned.iter().count(), 10);
        assert!(scanned.iter().all(|m| m.height() == 32 && m.subset() == Subset::classify(m.p())));
    }
}
