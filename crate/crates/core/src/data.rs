//! Ordinal datasets: folder loading, synthetic generation and stratified folds.
//!
//! Labels are consecutive integers `1..=K`. Pixels are stored as `f64` in
//! `[0, 1]`, channel-major (`C × H × W`), so the dynamic range used by SSIM
//! is always 1.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CigError, Result};

/// Lower and upper end of the intensity range that synthetic category bands cover.
const BAND_LOW: f64 = 0.1;
const BAND_HIGH: f64 = 0.9;
const BACKGROUND: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.02;
/// Half-extent of a synthetic shape as a fraction of the image side.
const SHAPE_RADIUS: f64 = 0.28;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(CigError::shape(
                "image buffer",
                channels * height * width,
                data.len(),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CigError::invalid("image", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); channels * height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.data
    }

    /// Reads a PNG/JPEG file, converting to `channels` (1 or 3) and optionally
    /// resizing to a `size × size` square.
    pub fn load(path: &Path, channels: usize, size: Option<u32>) -> Result<Self> {
        let unreadable = |reason: String| CigError::UnreadableImage {
            path: path.to_path_buf(),
            reason,
        };
        let mut img = image::open(path).map_err(|e| unreadable(e.to_string()))?;
        if let Some(s) = size {
            if img.width() != s || img.height() != s {
                img = img.resize_exact(s, s, image::imageops::FilterType::Triangle);
            }
        }
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = match channels {
            1 => {
                let g = img.to_luma8();
                g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()
            }
            3 => {
                let rgb = img.to_rgb8();
                let mut data = vec![0.0; 3 * h * w];
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[c * h * w + y as usize * w + x as usize] = p.0[c] as f64 / 255.0;
                    }
                }
                data
            }
            n => return Err(CigError::invalid("channels", format!("{n} (expected 1 or 3)"))),
        };
        Image::new(channels, h, w, data)
    }

    /// Writes the image as an 8-bit PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height, self.width);
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let res = match self.channels {
            1 => image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
                image::Luma([q(self.data[y as usize * w + x as usize])])
            })
            .save(path),
            3 => image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |c: usize| q(self.data[c * h * w + y as usize * w + x as usize]);
                image::Rgb([at(0), at(1), at(2)])
            })
            .save(path),
            n => {
                return Err(CigError::invalid(
                    "channels",
                    format!("cannot encode {n}-channel image as PNG"),
                ))
            }
        };
        res.map_err(|e| CigError::UnreadableImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalSample {
    pub id: String,
    pub image: Image,
    pub label: u32,
}

/// An immutable labelled dataset with consecutive categories `1..=K`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalDataset {
    samples: Vec<OrdinalSample>,
    k: usize,
    counts: Vec<usize>,
}

impl OrdinalDataset {
    pub fn new(samples: Vec<OrdinalSample>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(CigError::invalid("K", "at least two categories are required"));
        }
        let mut counts = vec![0; k];
        let shape = samples.first().map(|s| s.image.shape());
        for s in &samples {
            if s.label == 0 || s.label as usize > k {
                return Err(CigError::LabelOutOfRange { label: s.label, k });
            }
            if Some(s.image.shape()) != shape {
                return Err(CigError::shape(
                    "dataset image",
                    format!("{:?}", shape.unwrap_or_default()),
                    format!("{:?} (sample {})", s.image.shape(), s.id),
                ));
            }
            counts[s.label as usize - 1] += 1;
        }
        Ok(OrdinalDataset { samples, k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[OrdinalSample] {
        &self.samples
    }

    pub fn sample(&self, idx: usize) -> &OrdinalSample {
        &self.samples[idx]
    }

    /// Per-category counts, index `c - 1` for label `c`.
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, label: u32) -> usize {
        if label == 0 || label as usize > self.k {
            0
        } else {
            self.counts[label as usize - 1]
        }
    }

    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(|s| s.image.shape())
    }

    pub fn empty_categories(&self) -> Vec<u32> {
        (1..=self.k as u32).filter(|&c| self.count(c) == 0).collect()
    }

    /// Sample indices grouped by label (`result[c - 1]`), in dataset order.
    pub fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.label as usize - 1].push(i);
        }
        out
    }

    /// A dataset restricted to `indices`, keeping K.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let samples: Vec<_> = indices.iter().map(|&i| self.samples[i].clone()).collect();
        let mut counts = vec![0; self.k];
        for s in &samples {
            counts[s.label as usize - 1] += 1;
        }
        OrdinalDataset {
            samples,
            k: self.k,
            counts,
        }
    }

    /// SHA-256 over ids, labels and 8-bit quantised pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update(s.id.as_bytes());
            h.update(s.label.to_le_bytes());
            let px: Vec<u8> = s
                .image
                .pixels()
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect();
            h.update(&px);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Number of channels to convert to (1 or 3).
    pub channels: usize,
    /// Resize every image to a `size × size` square.
    pub size: Option<u32>,
}

impl LoadOptions {
    pub fn grayscale(size: Option<u32>) -> Self {
        LoadOptions { channels: 1, size }
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Loads `<root>/<1..K>/<images>`.
///
/// Category directories must be consecutive starting at 1. Empty category
/// directories are allowed and logged; files are read in sorted order.
pub fn load_folder_dataset(root: &Path, opts: LoadOptions) -> Result<OrdinalDataset> {
    let mut dirs: BTreeMap<u32, PathBuf> = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| CigError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| CigError::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        match name.parse::<u32>() {
            Ok(c) if c > 0 => {
                dirs.insert(c, path);
            }
            _ => return Err(CigError::BadCategoryName(path)),
        }
    }
    let k = match dirs.keys().next_back() {
        Some(&k) => k,
        None => return Err(CigError::NoCategories(root.to_path_buf())),
    };
    if let Some(gap) = (1..=k).find(|c| !dirs.contains_key(c)) {
        return Err(CigError::MissingCategory(gap));
    }
    if k < 2 {
        return Err(CigError::invalid("K", "at least two category directories are required"));
    }

    let mut samples = Vec::new();
    let mut expected_shape = None;
    for (&label, dir) in &dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CigError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            log::warn!("category {label} has no images in {}", dir.display());
        }
        for path in files {
            let image = Image::load(&path, opts.channels.max(1), opts.size)?;
            match expected_shape {
                None => expected_shape = Some(image.shape()),
                Some(shape) if shape != image.shape() => {
                    return Err(CigError::ImageShape {
                        path,
                        expected: shape,
                        actual: image.shape(),
                    })
                }
                _ => {}
            }
            let id = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            samples.push(OrdinalSample { id, image, label });
        }
    }
    OrdinalDataset::new(samples, k as usize)
}

/// Per-category counts and provenance written next to a folder dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub k: usize,
    pub counts: Vec<usize>,
    pub seed: Option<u64>,
    pub image_shape: Option<[usize; 3]>,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn describe(ds: &OrdinalDataset, seed: Option<u64>) -> Self {
        DatasetManifest {
            k: ds.k(),
            counts: ds.counts().to_vec(),
            seed,
            image_shape: ds.image_shape().map(|(c, h, w)| [c, h, w]),
            content_hash: ds.content_hash(),
        }
    }
}

/// Writes `ds` in folder layout and a `manifest.json`. Every category gets a
/// directory, even when empty.
pub fn save_folder_dataset(ds: &OrdinalDataset, root: &Path, seed: Option<u64>) -> Result<DatasetManifest> {
    for c in 1..=ds.k() {
        let dir = root.join(c.to_string());
        fs::create_dir_all(&dir).map_err(|e| CigError::io(&dir, e))?;
    }
    for s in ds.samples() {
        let path = root.join(s.label.to_string()).join(format!("{}.png", s.id));
        s.image.save_png(&path)?;
    }
    let manifest = DatasetManifest::describe(ds, seed);
    let path = root.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CigError::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
}

impl ShapeKind {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            // apex at the top, base at the bottom
            ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuralVariation {
    pub shapes: Vec<ShapeKind>,
    /// Maximum centre offset as a fraction of the image side.
    pub position_jitter: f64,
}

impl Default for StructuralVariation {
    fn default() -> Self {
        StructuralVariation {
            shapes: vec![ShapeKind::Square, ShapeKind::Disk, ShapeKind::Triangle],
            position_jitter: 0.15,
        }
    }
}

/// Recipe for a synthetic imbalanced, overlapping ordinal dataset.
///
/// The categorical factor is the foreground intensity: category `c` draws it
/// from the centre of the `c`-th of K equal bands on `[0.1, 0.9]` plus Gaussian
/// noise with standard deviation `overlap_sigma` band widths. Shape and
/// position vary independently of the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(rename = "K")]
    pub k: usize,
    pub proportions: Vec<f64>,
    pub image_size: usize,
    pub overlap_sigma: f64,
    #[serde(default)]
    pub structural_variation: StructuralVariation,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(CigError::invalid("K", "at least two categories are required"));
        }
        if self.proportions.len() != self.k {
            return Err(CigError::invalid(
                "proportions",
                format!("length {} does not match K = {}", self.proportions.len(), self.k),
            ));
        }
        if self.proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CigError::invalid("proportions", "entries must be nonnegative"));
        }
        let sum: f64 = self.proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CigError::invalid("proportions", format!("sum to {sum}, expected 1")));
        }
        if !(self.overlap_sigma >= 0.0 && self.overlap_sigma.is_finite()) {
            return Err(CigError::invalid("overlap_sigma", "must be a finite value >= 0"));
        }
        if self.image_size < 4 {
            return Err(CigError::invalid("image_size", "must be at least 4"));
        }
        if self.structural_variation.shapes.is_empty() {
            return Err(CigError::invalid("structural_variation.shapes", "must not be empty"));
        }
        if !(0.0..0.5).contains(&self.structural_variation.position_jitter) {
            return Err(CigError::invalid("structural_variation.position_jitter", "must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Turns relative category weights (e.g. rounded percentages that do not
    /// add up exactly) into proportions summing to one.
    pub fn proportions_from_weights(weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    }

    pub fn band_width(&self) -> f64 {
        (BAND_HIGH - BAND_LOW) / self.k as f64
    }

    pub fn band_center(&self, label: u32) -> f64 {
        BAND_LOW + (label as f64 - 0.5) * self.band_width()
    }

    /// Category sizes: rounded proportions with the rounding remainder
    /// credited to (or taken from) the majority category.
    pub fn category_counts(&self, n_total: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if n_total < self.k {
            return Err(CigError::invalid("n_total", format!("{n_total} is smaller than K = {}", self.k)));
        }
        let mut counts: Vec<i64> = self
            .proportions
            .iter()
            .map(|p| (p * n_total as f64).round() as i64)
            .collect();
        let majority = self
            .proportions
            .iter()
            .enumerate()
            .fold(0, |best, (i, p)| if *p > self.proportions[best] { i } else { best });
        counts[majority] += n_total as i64 - counts.iter().sum::<i64>();
        if counts[majority] < 0 {
            return Err(CigError::invalid("proportions", "rounding leaves the majority category negative"));
        }
        Ok(counts.into_iter().map(|c| c as usize).collect())
    }
}

/// Ground-truth generative factors of one synthetic sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFactors {
    pub intensity: f64,
    pub shape: ShapeKind,
    pub offset: (f64, f64),
}

pub fn build_synthetic_dataset(spec: &SyntheticSpec, n_total: usize) -> Result<OrdinalDataset> {
    synthesize(spec, n_total).map(|(ds, _)| ds)
}

/// Like [`build_synthetic_dataset`] but also returns the factors of every sample.
pub fn synthesize(spec: &SyntheticSpec, n_total: usize) -> Result<(OrdinalDataset, Vec<SampleFactors>)> {
    let counts = spec.category_counts(n_total)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let band_noise = Normal::new(0.0, spec.overlap_sigma * spec.band_width())
        .map_err(|e| CigError::invalid("overlap_sigma", e.to_string()))?;
    let pixel_noise = Normal::new(0.0, PIXEL_NOISE).expect("constant std is valid");
    let size = spec.image_size;
    let sv = &spec.structural_variation;

    let mut samples = Vec::with_capacity(n_total);
    let mut factors = Vec::with_capacity(n_total);
    for (ci, &n) in counts.iter().enumerate() {
        let label = ci as u32 + 1;
        for i in 0..n {
            let intensity = (spec.band_center(label) + band_noise.sample(&mut rng)).clamp(0.0, 1.0);
            let shape = sv.shapes[rng.random_range(0..sv.shapes.len())];
            let j = sv.position_jitter;
            let offset = if j > 0.0 {
                (rng.random_range(-j..=j), rng.random_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            let cx = (0.5 + offset.0) * size as f64;
            let cy = (0.5 + offset.1) * size as f64;
            let r = SHAPE_RADIUS * size as f64;
            let mut data = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    let base = if shape.contains(dx, dy, r) { intensity } else { BACKGROUND };
                    data.push((base + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
            samples.push(OrdinalSample {
                id: format!("c{label}_{i:05}"),
                image: Image::new(1, size, size, data)?,
                label,
            });
            factors.push(SampleFactors {
                intensity,
                shape,
                offset,
            });
        }
    }
    Ok((OrdinalDataset::new(samples, spec.k)?, factors))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldWarning {
    /// The category has fewer samples than folds; the listed folds have none
    /// of it in their validation part.
    ShortCategory {
        label: u32,
        count: usize,
        folds_without: Vec<usize>,
    },
    /// A single-sample category is kept in every training part and never validated.
    TrainOnlyCategory { label: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Fold>,
    pub warnings: Vec<FoldWarning>,
}

/// Stratified k-fold split.
///
/// Each category is shuffled and dealt round-robin over the folds, with the
/// dealing position carried across categories so fold sizes stay within one
/// sample of each other.
pub fn split_folds(ds: &OrdinalDataset, n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(CigError::invalid("n_folds", "at least two folds are required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of: Vec<Option<usize>> = vec![None; ds.len()];
    let mut warnings = Vec::new();
    let mut cursor = 0usize;
    for (ci, mut members) in ds.indices_by_label().into_iter().enumerate() {
        let label = ci as u32 + 1;
        let count = members.len();
        if count == 0 {
            continue;
        }
        members.shuffle(&mut rng);
        if count == 1 {
            log::warn!("category {label} has a single sample; it is used for training only");
            warnings.push(FoldWarning::TrainOnlyCategory { label });
            continue;
        }
        let mut hit = vec![false; n_folds];
        for (j, &idx) in members.iter().enumerate() {
            let f = (cursor + j) % n_folds;
            fold_of[idx] = Some(f);
            hit[f] = true;
        }
        cursor = (cursor + count) % n_folds;
        if count < n_folds {
            let folds_without: Vec<usize> = (0..n_folds).filter(|&f| !hit[f]).collect();
            log::warn!(
                "category {label} has {count} samples for {n_folds} folds; folds {folds_without:?} validate without it"
            );
            warnings.push(FoldWarning::ShortCategory {
                label,
                count,
                folds_without,
            });
        }
    }
    let folds = (0..n_folds)
        .map(|f| {
            let (validation, train): (Vec<usize>, Vec<usize>) =
                (0..ds.len()).partition(|&i| fold_of[i] == Some(f));
            Fold { train, validation }
        })
        .collect();
    Ok(FoldSplit { folds, warnings })
}
