//! Image/mask datasets and the synthetic task generator.
//!
//! A dataset is a directory holding `manifest.json` plus 8-bit binary PGM
//! images and masks. Mask pixel values are the integer labels themselves.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss_metrics::LabelMap;
use crate::numerics::{Element, Tensor};

pub mod pgm {
    //! Binary graymap (P5) files.

    use std::fs::File;
    use std::io::{BufReader, BufWriter};
    use std::path::Path;

    use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
    use image::{DynamicImage, ExtendedColorType, GrayImage, ImageEncoder};

    use crate::error::{Error, Result};

    pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
        if pixels.len() != width * height {
            return Err(Error::shape("write_gray", format!("{} pixels for {width}x{height}", pixels.len())));
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(pixels, width as u32, height as u32, ExtendedColorType::L8)
            .map_err(|e| Error::dataset(path, e.to_string()))?;
        std::io::Write::flush(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn read_gray(path: &Path) -> Result<GrayImage> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = PnmDecoder::new(BufReader::new(file)).map_err(|e| Error::dataset(path, e.to_string()))?;
        let img = DynamicImage::from_decoder(decoder).map_err(|e| Error::dataset(path, e.to_string()))?;
        match img {
            DynamicImage::ImageLuma8(g) => Ok(g),
            other => Err(Error::dataset(path, format!("expected 8-bit graymap, got {:?}", other.color()))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Blobs,
    Vessels,
    Instances,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Blobs, Task::Vessels, Task::Instances];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Blobs => "blobs",
            Task::Vessels => "vessels",
            Task::Instances => "instances",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| {
            Error::config(format!("unknown task {s:?}; valid tasks: blobs, vessels, instances"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}; valid splits: train, val, test"))),
        }
    }
}

/// Paths relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    #[serde(default)]
    pub train: Vec<SplitEntry>,
    #[serde(default)]
    pub val: Vec<SplitEntry>,
    #[serde(default)]
    pub test: Vec<SplitEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub image_size: usize,
    pub splits: Splits,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Reads a manifest; `path` may be the JSON file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::dataset(&file, e.to_string()))?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_structure().map_err(|msg| Error::dataset(&file, msg))?;
        Ok(m)
    }

    pub fn save(&self) -> Result<PathBuf> {
        let file = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&file, text + "\n").map_err(|e| Error::io(&file, e))?;
        Ok(file)
    }

    fn check_structure(&self) -> std::result::Result<(), String> {
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(format!("num_classes {} outside 2..=256", self.num_classes));
        }
        if self.image_size == 0 {
            return Err("image_size must be positive".into());
        }
        let mut seen = std::collections::HashSet::new();
        for e in self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test) {
            if !seen.insert(&e.image) {
                return Err(format!("image {} listed more than once across splits", e.image));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[SplitEntry] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// Decodes every listed file and checks labels.
    pub fn validate(&self) -> Result<()> {
        for split in [Split::Train, Split::Val, Split::Test] {
            let n = self.split(split).len();
            for chunk in (0..n).collect::<Vec<_>>().chunks(32) {
                load_batch::<f32>(self, split, chunk)?;
            }
        }
        Ok(())
    }
}

/// Images `(B, 1, H, W)` in `[0, 1]` with their label maps.
#[derive(Clone, Debug)]
pub struct SampleBatch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<LabelMap>,
    pub ids: Vec<String>,
}

impl<T: Element> SampleBatch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as `(1, H, W)`.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let s = self.images.shape();
        let n = s[1] * s[2] * s[3];
        Tensor::new(&s[1..], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("batch slice")
    }
}

/// Loads `indices` of `split`, resizing to the manifest's `image_size`
/// (bilinear for images, nearest for masks) when a file differs.
pub fn load_batch<T: Element>(manifest: &DatasetManifest, split: Split, indices: &[usize]) -> Result<SampleBatch<T>> {
    let entries = manifest.split(split);
    if indices.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let s = manifest.image_size;
    let mut images = Vec::with_capacity(indices.len() * s * s);
    let mut labels = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = entries.get(i).ok_or_else(|| {
            Error::Usage(format!("index {i} out of range for {split:?} split of {} entries", entries.len()))
        })?;
        let img_path = manifest.root.join(&e.image);
        let mask_path = manifest.root.join(&e.mask);
        let img = fit(pgm::read_gray(&img_path)?, s, FilterType::Triangle);
        let mask = fit(pgm::read_gray(&mask_path)?, s, FilterType::Nearest);
        if let Some(&bad) = mask.as_raw().iter().find(|&&l| l as usize >= manifest.num_classes) {
            return Err(Error::dataset(
                &mask_path,
                format!("label {bad} exceeds num_classes {}", manifest.num_classes),
            ));
        }
        images.extend(img.as_raw().iter().map(|&v| T::from_f64(v as f64 / 255.0)));
        labels.push(LabelMap::new(s, s, mask.into_raw())?);
        ids.push(e.image.clone());
    }
    Ok(SampleBatch { images: Tensor::new([indices.len(), 1, s, s], images)?, labels, ids })
}

/// One grayscale PGM as a `(1, size, size)` tensor in `[0, 1]`.
pub fn load_image<T: Element>(path: &Path, size: usize) -> Result<Tensor<T>> {
    let img = fit(pgm::read_gray(path)?, size, FilterType::Triangle);
    Tensor::new([1, size, size], img.as_raw().iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect())
}

fn fit(img: GrayImage, size: usize, filter: FilterType) -> GrayImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, filter)
    }
}

/// Fraction of unsplit data assigned to training.
pub const TRAIN_FRACTION: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: Task,
    /// Total image count across splits.
    pub count: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Test images; defaults to the 7:3 split of `count`.
    pub test_count: Option<usize>,
}

impl SyntheticSpec {
    pub fn split_sizes(&self) -> Result<(usize, usize)> {
        if self.count == 0 {
            return Err(Error::config("count must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!("image size {} below the minimum of 16", self.image_size)));
        }
        let test = self
            .test_count
            .unwrap_or_else(|| self.count - (self.count as f64 * TRAIN_FRACTION).round() as usize);
        if test >= self.count {
            return Err(Error::config(format!("test count {test} leaves no training images out of {}", self.count)));
        }
        Ok((self.count - test, test))
    }
}

/// Source and target appearance variants of one synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub source: DatasetManifest,
    pub target: DatasetManifest,
}

/// Appearance of one variant: `v' = 0.5 + contrast (v - 0.5) + noise`.
#[derive(Clone, Copy, Debug)]
pub struct Appearance {
    pub contrast: f64,
    pub noise: f64,
}

pub const SOURCE_APPEARANCE: Appearance = Appearance { contrast: 1.0, noise: 0.05 };
pub const TARGET_APPEARANCE: Appearance = Appearance { contrast: 0.7, noise: 0.15 };

const BACKGROUND: f64 = 0.25;
const FOREGROUND: f64 = 0.75;

/// Writes `out/source` and `out/target`, each with its own manifest. Both
/// variants share masks and clean images; only contrast and noise differ.
pub fn generate_synthetic(out: &Path, spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let (train, _test) = spec.split_sizes()?;
    let s = spec.image_size;
    let mut geometry = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut source_noise = ChaCha8Rng::seed_from_u64(spec.seed);
    source_noise.set_stream(1);
    let mut target_noise = ChaCha8Rng::seed_from_u64(spec.seed);
    target_noise.set_stream(2);

    let mut variants = Vec::new();
    for variant in ["source", "target"] {
        let root = out.join(variant);
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
        }
        variants.push(DatasetManifest {
            name: format!("{}-{variant}", spec.task),
            num_classes: 2,
            image_size: s,
            splits: Splits::default(),
            root,
        });
    }

    for i in 0..spec.count {
        let (clean, mask) = render(spec.task, s, &mut geometry);
        let entry = SplitEntry { image: format!("images/{i:04}.pgm"), mask: format!("masks/{i:04}.pgm") };
        for (m, (app, rng)) in variants
            .iter_mut()
            .zip([(SOURCE_APPEARANCE, &mut source_noise), (TARGET_APPEARANCE, &mut target_noise)])
        {
            let pixels = appearance(&clean, app, rng);
            pgm::write_gray(&m.root.join(&entry.image), s, s, &pixels)?;
            pgm::write_gray(&m.root.join(&entry.mask), s, s, &mask)?;
            if i < train {
                m.splits.train.push(entry.clone());
            } else {
                m.splits.test.push(entry.clone());
            }
        }
    }
    for m in &variants {
        m.save()?;
    }
    let target = variants.pop().expect("two variants");
    let source = variants.pop().expect("two variants");
    Ok(SyntheticDataset { source, target })
}

fn appearance(clean: &[f64], app: Appearance, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let noise = Normal::new(0.0, app.noise).expect("finite sigma");
    clean
        .iter()
        .map(|&v| {
            let v = 0.5 + app.contrast * (v - 0.5) + noise.sample(rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect()
}

/// Clean intensity image and binary mask for one sample.
fn render(task: Task, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let scale = size as f64 / 64.0;
    // Signed "inside" score per pixel: positive inside, in pixel units.
    let mut inside = vec![f64::NEG_INFINITY; size * size];
    match task {
        Task::Blobs => {
            for _ in 0..rng.random_range(1..=3) {
                let a = rng.random_range(8.0..=18.0) * scale;
                let b = rng.random_range(8.0..=18.0) * scale;
                let margin = 4.0 * scale;
                let cx = rng.random_range(margin..size as f64 - margin);
                let cy = rng.random_range(margin..size as f64 - margin);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let (sin, cos) = theta.sin_cos();
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        let (u, v) = (dx * cos + dy * sin, -dx * sin + dy * cos);
                        let r = ((u / a).powi(2) + (v / b).powi(2)).sqrt();
                        let score = (1.0 - r) * a.min(b);
                        let cell = &mut inside[y * size + x];
                        *cell = cell.max(score);
                    }
                }
            }
        }
        Task::Vessels => {
            for _ in 0..rng.random_range(1..=3) {
                let pts: Vec<(f64, f64)> = (0..4)
                    .map(|_| (rng.random_range(0.0..size as f64), rng.random_range(0.0..size as f64)))
                    .collect();
                let radius = rng.random_range(0.8..=1.6) * scale;
                let steps = 4 * size;
                let curve: Vec<(f64, f64)> = (0..=steps)
                    .map(|k| {
                        let t = k as f64 / steps as f64;
                        let w = [(1.0 - t).powi(3), 3.0 * t * (1.0 - t).powi(2), 3.0 * t * t * (1.0 - t), t.powi(3)];
                        let x = (0..4).map(|i| w[i] * pts[i].0).sum();
                        let y = (0..4).map(|i| w[i] * pts[i].1).sum();
                        (x, y)
                    })
                    .collect();
                for y in 0..size {
                    for x in 0..size {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        let d = curve
                            .iter()
                            .map(|&(cx, cy)| (px - cx).powi(2) + (py - cy).powi(2))
                            .fold(f64::INFINITY, f64::min)
                            .sqrt();
                        let cell = &mut inside[y * size + x];
                        *cell = cell.max(radius - d);
                    }
                }
            }
        }
        Task::Instances => {
            let target = rng.random_range(20..=60);
            let gap = 1.5 * scale;
            let mut disks: Vec<(f64, f64, f64)> = Vec::new();
            let mut attempts = 0;
            while disks.len() < target && attempts < 100_000 {
                attempts += 1;
                let r = rng.random_range(1.5..=2.5) * scale;
                let lo = r + 1.0;
                let cx = rng.random_range(lo..size as f64 - lo);
                let cy = rng.random_range(lo..size as f64 - lo);
                if disks.iter().all(|&(x, y, q)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() >= r + q + gap) {
                    disks.push((cx, cy, r));
                }
            }
            for &(cx, cy, r) in &disks {
                let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size));
                let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size));
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        let cell = &mut inside[y * size + x];
                        *cell = cell.max(r - d);
                    }
                }
            }
        }
    }
    // Soft edges: intensity ramps over about one pixel around the boundary.
    let clean = inside
        .iter()
        .map(|&s| BACKGROUND + (FOREGROUND - BACKGROUND) / (1.0 + (-2.0 * s).exp()))
        .collect();
    let mask = inside.iter().map(|&s| (s >= 0.0) as u8).collect();
    (clean, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, count: usize) -> SyntheticSpec {
        SyntheticSpec { task, count, seed: 3, image_size: 64, test_count: None }
    }

    #[test]
    fn task_names() {
        assert_eq!("vessels".parse::<Task>().unwrap(), Task::Vessels);
        let err = "cells".parse::<Task>().unwrap_err().to_string();
        assert!(err.contains("blobs, vessels, instances"));
    }

    #[test]
    fn default_split_is_seven_to_three() {
        assert_eq!(spec(Task::Blobs, 10).split_sizes().unwrap(), (7, 3));
        let s = SyntheticSpec { test_count: Some(60), ..spec(Task::Blobs, 260) };
        assert_eq!(s.split_sizes().unwrap(), (200, 60));
        assert!(SyntheticSpec { test_count: Some(5), ..spec(Task::Blobs, 5) }.split_sizes().is_err());
        assert!(spec(Task::Blobs, 0).split_sizes().is_err());
    }

    #[test]
    fn blobs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(Task::Blobs, 4)).unwrap();
        let m = DatasetManifest::load(&dir.path().join("source")).unwrap();
        assert_eq!(m, ds.source);
        let b = load_batch::<f32>(&m, Split::Train, &[0]).unwrap();
        assert_eq!(b.images.shape(), &[1, 1, 64, 64]);
        assert!(b.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(b.labels[0].labels.iter().all(|&l| l <= 1));
        assert!(b.labels[0].labels.contains(&1));
        m.validate().unwrap();
    }

    #[test]
    fn masks_shared_between_variants() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(Task::Vessels, 3)).unwrap();
        let a = load_batch::<f32>(&ds.source, Split::Train, &[0, 1]).unwrap();
        let b = load_batch::<f32>(&ds.target, Split::Train, &[0, 1]).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_ne!(a.images.data(), b.images.data());
    }

    #[test]
    fn label_overflow_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(Task::Blobs, 2)).unwrap();
        let path = ds.source.root.join(&ds.source.splits.train[0].mask);
        pgm::write_gray(&path, 64, 64, &[7; 64 * 64]).unwrap();
        let err = load_batch::<f32>(&ds.source, Split::Train, &[0]).unwrap_err();
        assert!(matches!(&err, Error::Dataset { path: p, .. } if *p == path), "{err}");
    }

    #[test]
    fn resizes_foreign_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(Task::Blobs, 2)).unwrap();
        let mut m = ds.source.clone();
        m.image_size = 32;
        let b = load_batch::<f32>(&m, Split::Train, &[0]).unwrap();
        assert_eq!(b.images.shape(), &[1, 1, 32, 32]);
        assert!(b.labels[0].labels.iter().all(|&l| l <= 1));
    }

    #[test]
    fn unwritable_directory_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(generate_synthetic(&file, &spec(Task::Blobs, 1)), Err(Error::Io { .. })));
    }

    #[test]
    fn duplicate_entries_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(dir.path(), &spec(Task::Blobs, 3)).unwrap();
        let mut m = ds.source.clone();
        m.splits.test.push(m.splits.train[0].clone());
        m.save().unwrap();
        assert!(matches!(DatasetManifest::load(&m.root), Err(Error::Dataset { .. })));
    }
}
