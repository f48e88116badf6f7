//! Synthetic graded joint images, the preprocessing pipeline, splitting,
//! augmentation and the on-disk dataset layout.
//!
//! On disk a dataset directory holds `manifest.toml`, `index.csv`
//! (id, label, side, split, roi) and one raw tensor per sample under
//! `samples/`.

mod preprocess;
mod synth;

pub use preprocess::{hflip, hist_equalize, histogram_variance, resize_keep_aspect, split_bilateral, split_bilateral_with};
pub use synth::GAP_FRACTION;

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indices, Execution};
use crate::tensor::Tensor;

/// Number of severity grades (0..=4).
pub const NUM_GRADES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.top + self.height <= h && self.left + self.width <= w
    }

    /// The same rectangle after mirroring an image of width `w`.
    pub fn mirrored(&self, w: usize) -> Roi {
        Roi {
            left: w - self.left - self.width,
            ..*self
        }
    }

    /// Smallest rectangle covering this one after scaling `from` -> `to`.
    pub fn scaled(&self, from: [usize; 2], to: [usize; 2]) -> Roi {
        let sy = to[0] as f64 / from[0] as f64;
        let sx = to[1] as f64 / from[1] as f64;
        let top = ((self.top as f64 * sy).floor() as usize).min(to[0] - 1);
        let left = ((self.left as f64 * sx).floor() as usize).min(to[1] - 1);
        let bottom = (((self.top + self.height) as f64 * sy).ceil() as usize).clamp(top + 1, to[0]);
        let right = (((self.left + self.width) as f64 * sx).ceil() as usize).clamp(left + 1, to[1]);
        Roi {
            top,
            left,
            height: bottom - top,
            width: right - left,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// (H,W,1) with values in [0,1].
    pub image: Tensor,
    pub label: usize,
    pub roi: Roi,
    pub side: Side,
    pub split: Split,
    /// Set on augmented copies: the id of the mirrored original.
    pub mirror_of: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub seed: u64,
    /// Samples per grade.
    pub counts: Vec<usize>,
    /// Target (height, width) after resampling.
    pub image_size: [usize; 2],
    /// Train, validation and test fractions.
    pub split_fractions: [f64; 3],
    /// Mirror right knees into the left-knee orientation after splitting.
    pub canonical_flip: bool,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        Self {
            seed: 0,
            counts: vec![40; NUM_GRADES],
            image_size: [128, 96],
            split_fractions: [0.63, 0.07, 0.30],
            canonical_flip: true,
        }
    }
}

impl DatasetManifest {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.len() != NUM_GRADES {
            return Err(Error::Data(format!(
                "counts must list {NUM_GRADES} grades, got {}",
                self.counts.len()
            )));
        }
        if self.total() == 0 {
            return Err(Error::Data("counts request no samples".into()));
        }
        if self.image_size.iter().any(|&s| s < 16) {
            return Err(Error::Data(format!("image size {:?} is below 16 pixels", self.image_size)));
        }
        validate_fractions(&self.split_fractions)?;
        let parts = self.split_fractions.iter().filter(|&&f| f > 0.0).count();
        if let Some((g, n)) = self.counts.iter().enumerate().find(|&(_, &n)| n > 0 && n < parts) {
            return Err(Error::Data(format!(
                "grade {g} has {n} samples, fewer than the {parts} splits it must populate"
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format(path, e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

fn validate_fractions(f: &[f64; 3]) -> Result<()> {
    if f.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Data(format!("split fractions {f:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn generate_one(manifest: &DatasetManifest, index: usize, grade: usize) -> Result<Sample> {
    let mut rng = sample_rng(manifest.seed, index);
    let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
    let [th, tw] = manifest.image_size;
    let raw_h = (th as f64 * 1.25).round() as usize;
    let half_w = (tw as f64 * 1.25).round() as usize;
    let (canvas, canonical_roi) = synth::draw_bilateral(grade, side, raw_h, half_w, &mut rng);
    let (left, right) = split_bilateral_with(&canvas, manifest.canonical_flip)?;
    let (half, roi) = match side {
        Side::Left => (left, canonical_roi),
        Side::Right if manifest.canonical_flip => (right, canonical_roi),
        Side::Right => (right, canonical_roi.mirrored(half_w)),
    };
    let resized = resize_keep_aspect(&half, manifest.image_size)?;
    Ok(Sample {
        id: index,
        image: hist_equalize(&resized),
        label: grade,
        roi: roi.scaled([raw_h, half_w], manifest.image_size),
        side,
        split: Split::Train,
        mirror_of: None,
    })
}

/// Draws every sample of the manifest, grade by grade. Each sample has its
/// own random stream, so the result does not depend on `exec`. All samples
/// come back tagged `Split::Train`; see [`stratified_split`].
pub fn generate_synthetic(manifest: &DatasetManifest, exec: Execution) -> Result<Vec<Sample>> {
    manifest.validate()?;
    let grades: Vec<usize> = manifest
        .counts
        .iter()
        .enumerate()
        .flat_map(|(g, &n)| std::iter::repeat_n(g, n))
        .collect();
    map_indices(exec, grades.len(), |i| generate_one(manifest, i, grades[i]))
        .into_iter()
        .collect()
}

/// Generates and split-tags the manifest's dataset.
pub fn build_dataset(manifest: &DatasetManifest, exec: Execution) -> Result<Vec<Sample>> {
    let samples = generate_synthetic(manifest, exec)?;
    stratified_split(samples, manifest.split_fractions, manifest.seed)
}

/// Assigns splits per grade: `round(f_test * n)` to test, `round(f_val * n)`
/// to validation, the rest to training.
pub fn stratified_split(mut samples: Vec<Sample>, fractions: [f64; 3], seed: u64) -> Result<Vec<Sample>> {
    validate_fractions(&fractions)?;
    let parts = fractions.iter().filter(|&&f| f > 0.0).count();
    let grades = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    for g in 0..grades {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == g).collect();
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < parts {
            return Err(Error::Data(format!("grade {g} has {n} samples, fewer than {parts} splits")));
        }
        members.shuffle(&mut sample_rng(seed ^ 0x5eed_5911, g));
        let n_test = (fractions[2] * n as f64).round() as usize;
        let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_test);
        for (k, &i) in members.iter().enumerate() {
            samples[i].split = if k < n_test {
                Split::Test
            } else if k < n_test + n_val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    Ok(samples)
}

/// Appends a mirrored copy of every training sample. Validation and test
/// samples are never copied.
pub fn hflip_augment(mut samples: Vec<Sample>) -> Vec<Sample> {
    let mut next_id = samples.iter().map(|s| s.id + 1).max().unwrap_or(0);
    let copies: Vec<Sample> = samples
        .iter()
        .filter(|s| s.split == Split::Train && s.mirror_of.is_none())
        .map(|s| {
            let id = next_id;
            next_id += 1;
            Sample {
                id,
                image: hflip(&s.image),
                roi: s.roi.mirrored(s.image.shape()[1]),
                mirror_of: Some(s.id),
                ..s.clone()
            }
        })
        .collect();
    samples.extend(copies);
    samples
}

pub fn in_split(samples: &[Sample], split: Split) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == split).collect()
}

/// Stacks sample images into a (B,H,W,1) batch.
pub fn batch_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    Tensor::stack(&images)
}

/// Per-split, per-grade counts: `counts[split][grade]`.
pub fn split_histogram(samples: &[Sample]) -> [[usize; NUM_GRADES]; 3] {
    let mut h = [[0; NUM_GRADES]; 3];
    for s in samples {
        h[s.split as usize][s.label] += 1;
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    id: usize,
    label: usize,
    side: Side,
    split: Split,
    roi_top: usize,
    roi_left: usize,
    roi_height: usize,
    roi_width: usize,
}

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const INDEX_FILE: &str = "index.csv";
pub const SAMPLES_DIR: &str = "samples";

fn sample_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(SAMPLES_DIR).join(format!("{id:06}.bin"))
}

/// Writes manifest, index and sample tensors under `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join(SAMPLES_DIR)).map_err(|e| Error::io(dir, e))?;
    manifest.save(&dir.join(MANIFEST_FILE))?;
    let index_path = dir.join(INDEX_FILE);
    let mut w = csv::Writer::from_path(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    for s in samples {
        if s.mirror_of.is_some() {
            continue;
        }
        w.serialize(IndexRow {
            id: s.id,
            label: s.label,
            side: s.side,
            split: s.split,
            roi_top: s.roi.top,
            roi_left: s.roi.left,
            roi_height: s.roi.height,
            roi_width: s.roi.width,
        })
        .map_err(|e| Error::format(&index_path, e.to_string()))?;
        s.image.save(&sample_path(dir, s.id))?;
    }
    w.flush().map_err(|e| Error::io(&index_path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("dataset directory {} does not exist", dir.display())));
    }
    let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))?;
    let index_path = dir.join(INDEX_FILE);
    let mut r = csv::Reader::from_path(&index_path).map_err(|e| Error::format(&index_path, e.to_string()))?;
    let [h, w] = manifest.image_size;
    let mut samples = Vec::new();
    for row in r.deserialize::<IndexRow>() {
        let row = row.map_err(|e| Error::format(&index_path, e.to_string()))?;
        let path = sample_path(dir, row.id);
        let image = Tensor::load(&path)?;
        if image.shape() != [h, w, 1] {
            return Err(Error::format(&path, format!("image shape {:?}, manifest says {h}x{w}x1", image.shape())));
        }
        let roi = Roi {
            top: row.roi_top,
            left: row.roi_left,
            height: row.roi_height,
            width: row.roi_width,
        };
        if row.label >= NUM_GRADES || !roi.fits(h, w) {
            return Err(Error::format(&index_path, format!("sample {} has an invalid label or roi", row.id)));
        }
        samples.push(Sample {
            id: row.id,
            image,
            label: row.label,
            roi,
            side: row.side,
            split: row.split,
            mirror_of: None,
        });
    }
    Ok((manifest, samples))
}
