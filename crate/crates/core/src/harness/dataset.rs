//! Synthetic shape dataset and its on-disk store.
//!
//! Each class is a (shape, color) pair drawn on a dark background at a random
//! position and scale, anti-aliased by 4×4 supersampling, with optional
//! additive uniform noise.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, RtkError};
use crate::rng::substream;
use crate::tokenizer::ImageBatch;

pub const DATASET_FORMAT: &str = "rtk_dataset_v1";
const CHANNELS: usize = 3;
const SUPERSAMPLE: usize = 4;
const BACKGROUND: [f64; 3] = [0.08, 0.08, 0.1];
const PALETTE: [[f64; 3]; 4] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.55, 0.95],
    [0.3, 0.85, 0.3],
    [0.95, 0.85, 0.2],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeDatasetConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for ShapeDatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            num_classes: 8,
            samples_per_class: 250,
            noise_level: 0.02,
            seed: 0,
        }
    }
}

impl ShapeDatasetConfig {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.image_size < 8 || patch_size == 0 || self.image_size % patch_size != 0 {
            return Err(invalid(format!(
                "image_size {} must be >= 8 and divisible by patch_size {patch_size}",
                self.image_size
            )));
        }
        if self.samples_per_class == 0 || self.num_classes == 0 {
            return Err(invalid("need at least one class and one sample per class"));
        }
        if self.num_classes > 4 * PALETTE.len() {
            return Err(invalid(format!("at most {} classes", 4 * PALETTE.len())));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(invalid("noise_level must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl Shape {
    pub fn of_class(class: usize) -> Shape {
        match class % 4 {
            0 => Shape::Circle,
            1 => Shape::Square,
            2 => Shape::Triangle,
            _ => Shape::Cross,
        }
    }

    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => {
                // apex up, base at cy + 0.8 r
                let top = -r;
                let base = 0.8 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half_width = r * (dy - top) / (base - top);
                dx.abs() <= half_width
            }
            Shape::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Renders one image of `class` using `rng` for placement and noise.
pub fn render(class: usize, size: usize, noise: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let shape = Shape::of_class(class);
    let color = PALETTE[(class / 4) % PALETTE.len()];
    let s = size as f64;
    let r = rng.random_range(0.2..0.35) * s;
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let mut img = Vec::with_capacity(size * size * CHANNELS);
    let step = 1.0 / SUPERSAMPLE as f64;
    for py in 0..size {
        for px in 0..size {
            let mut hits = 0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    hits += shape.contains(x, y, cx, cy, r) as usize;
                }
            }
            let cov = hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
            for ch in 0..CHANNELS {
                let mut v = BACKGROUND[ch] * (1.0 - cov) + color[ch] * cov;
                if noise > 0.0 {
                    v += rng.random_range(-noise..noise);
                }
                img.push(v.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Train and evaluation splits of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ShapeDatasetConfig,
    pub train: ImageBatch,
    pub eval: ImageBatch,
}

/// Generates `samples_per_class` images per class; the first 90% of each
/// class (rounded) go to the training split.
pub fn generate_dataset(config: &ShapeDatasetConfig) -> Result<Dataset> {
    config.validate(1)?;
    let size = config.image_size;
    let n_train = ((config.samples_per_class as f64) * 0.9).round() as usize;
    let mut train = (Vec::new(), Vec::new());
    let mut eval = (Vec::new(), Vec::new());
    for class in 0..config.num_classes {
        for i in 0..config.samples_per_class {
            let ordinal = (class * config.samples_per_class + i) as u64;
            let mut rng = substream(config.seed, ordinal);
            let img = render(class, size, config.noise_level, &mut rng);
            let split = if i < n_train { &mut train } else { &mut eval };
            split.0.extend(img);
            split.1.push(class as u32);
        }
    }
    Ok(Dataset {
        config: config.clone(),
        train: ImageBatch::new(size, CHANNELS, train.0, train.1)?,
        eval: ImageBatch::new(size, CHANNELS, eval.0, eval.1)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitHeader {
    file: String,
    n: usize,
    labels: Vec<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    image_size: usize,
    channels: usize,
    config: ShapeDatasetConfig,
    train: SplitHeader,
    eval: SplitHeader,
}

fn write_block(path: &Path, images: &ImageBatch) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &images.pixels {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_block(path: &Path, size: usize, channels: usize, labels: Vec<u32>) -> Result<ImageBatch> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let expected = labels.len() * size * size * channels * 4;
    if bytes.len() != expected {
        return Err(RtkError::Format(format!(
            "{} holds {} bytes, header implies {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let pixels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ImageBatch::new(size, channels, pixels, labels)
}

/// Writes `dataset.json` plus `train.f32` / `eval.f32` into `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        image_size: dataset.train.size,
        channels: dataset.train.channels,
        config: dataset.config.clone(),
        train: SplitHeader {
            file: "train.f32".into(),
            n: dataset.train.n,
            labels: dataset.train.labels.clone(),
        },
        eval: SplitHeader {
            file: "eval.f32".into(),
            n: dataset.eval.n,
            labels: dataset.eval.labels.clone(),
        },
    };
    write_block(&dir.join(&header.train.file), &dataset.train)?;
    write_block(&dir.join(&header.eval.file), &dataset.eval)?;
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let header: DatasetHeader = serde_json::from_str(&fs::read_to_string(dir.join("dataset.json"))?)?;
    if header.format != DATASET_FORMAT {
        return Err(RtkError::Format(format!("unknown dataset format {}", header.format)));
    }
    let (s, c) = (header.image_size, header.channels);
    Ok(Dataset {
        train: read_block(&dir.join(&header.train.file), s, c, header.train.labels)?,
        eval: read_block(&dir.join(&header.eval.file), s, c, header.eval.labels)?,
        config: header.config,
    })
}

/// Images rounded through `f32`, matching what a save/load cycle yields.
pub fn as_stored(images: &ImageBatch) -> ImageBatch {
    ImageBatch {
        pixels: images.pixels.iter().map(|&v| v as f32 as f64).collect(),
        ..images.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn small() -> ShapeDatasetConfig {
        ShapeDatasetConfig {
            samples_per_class: 10,
            noise_level: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        assert!(a.train.pixels.iter().chain(&a.eval.pixels).all(|v| (0.0..=1.0).contains(v)));
        let c = generate_dataset(&ShapeDatasetConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train.pixels, c.train.pixels);
    }

    #[test]
    fn classes_are_balanced_and_split() {
        let d = generate_dataset(&small()).unwrap();
        for class in 0..8u32 {
            let tr = d.train.labels.iter().filter(|&&l| l == class).count();
            let ev = d.eval.labels.iter().filter(|&&l| l == class).count();
            assert_eq!((tr, ev), (9, 1));
        }
    }

    #[test]
    fn store_roundtrip_is_bitwise() {
        let d = generate_dataset(&ShapeDatasetConfig { noise_level: 0.05, ..small() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train, as_stored(&d.train));
        assert_eq!(loaded.eval, as_stored(&d.eval));
        let again = dir.path().join("again");
        save_dataset(&generate_dataset(&ShapeDatasetConfig { noise_level: 0.05, ..small() }).unwrap(), &again).unwrap();
        assert_eq!(
            fs::read(dir.path().join("train.f32")).unwrap(),
            fs::read(again.join("train.f32")).unwrap()
        );
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_dataset(&ShapeDatasetConfig { samples_per_class: 0, ..small() }).is_err());
        assert!(generate_dataset(&ShapeDatasetConfig { noise_level: 1.0, ..small() }).is_err());
        assert!(ShapeDatasetConfig::default().validate(5).is_err());
    }

    #[test]
    fn shapes_cover_some_but_not_all_pixels() {
        let mut rng = rng_from(3);
        for class in 0..8 {
            let img = render(class, 32, 0.0, &mut rng);
            let fg = img.chunks(3).filter(|p| (p[0] - BACKGROUND[0]).abs() > 0.05).count();
            assert!(fg > 20 && fg < 900, "class {class}: {fg}");
        }
    }
}
