//! Desk-scale datasets and deterministic train/holdout/test splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ImageShape;

/// Labeled samples with stable ids (the index in the generated/loaded set).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub num_classes: usize,
    /// Present for image data; features are channel-major flattened.
    pub image_shape: Option<ImageShape>,
}

pub struct Splits {
    pub train: Dataset,
    pub holdout: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::shape(format!("{} labels", features.len()), labels.len()));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::OutOfRange {
                what: "label",
                detail: format!("{y} not in 0..{num_classes}"),
            });
        }
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::shape(format!("feature length {dim}"), "ragged rows"));
        }
        let ids = (0..features.len() as u64).collect();
        Ok(Dataset {
            features,
            labels,
            ids,
            num_classes,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            image_shape: self.image_shape,
        }
    }

    /// Random disjoint split; the remainder after holdout and test is train.
    pub fn split(&self, holdout_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
        if !(holdout_fraction > 0.0 && holdout_fraction <= 0.5) {
            return Err(Error::config(format!(
                "holdout_fraction {holdout_fraction} not in (0, 0.5]"
            )));
        }
        if !(0.0..1.0).contains(&test_fraction) || holdout_fraction + test_fraction >= 1.0 {
            return Err(Error::config("test_fraction must leave room for training data"));
        }
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_hold = ((n as f64) * holdout_fraction).round().max(1.0) as usize;
        let n_test = ((n as f64) * test_fraction).round() as usize;
        if n_hold + n_test >= n {
            return Err(Error::config(format!(
                "dataset of {n} samples too small for the requested split"
            )));
        }
        let (hold, rest) = order.split_at(n_hold);
        let (test, train) = rest.split_at(n_test);
        Ok(Splits {
            train: self.subset(train),
            holdout: self.subset(hold),
            test: self.subset(test),
        })
    }
}

const SPLIT_STREAM: u64 = 0x5eed_0000_5917;

/// Two interleaving half circles with isotropic Gaussian noise.
pub fn two_moons(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise.max(0.0)).expect("valid std");
    let outer = n / 2;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (upper, k, count) = if i < outer {
            (true, i, outer)
        } else {
            (false, i - outer, n - outer)
        };
        let angle = std::f64::consts::PI * k as f64 / (count.max(2) - 1) as f64;
        let (x, y) = if upper {
            (angle.cos(), angle.sin())
        } else {
            (1.0 - angle.cos(), 0.5 - angle.sin())
        };
        features.push(vec![x + jitter.sample(&mut rng), y + jitter.sample(&mut rng)]);
        labels.push(usize::from(!upper));
    }
    Dataset::new(features, labels, 2).expect("well-formed")
}

/// `classes` isotropic Gaussian clusters with centers drawn in `[-box, box]^dim`.
pub fn gaussian_blobs(n: usize, classes: usize, dim: usize, std: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 {
        return Err(Error::config("gaussian-blobs needs >= 2 classes and dim >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = 5.0;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| rng.random_range(-spread..spread)).collect())
        .collect();
    let noise = Normal::new(0.0, std.max(0.0)).expect("valid std");
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        features.push(centers[c].iter().map(|m| m + noise.sample(&mut rng)).collect());
        labels.push(c);
    }
    Dataset::new(features, labels, classes)
}

const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    [
        "..###...", ".#...#..", ".#...#..", ".#...#..", ".#...#..", ".#...#..", "..###...", "........",
    ],
    [
        "...#....", "..##....", "...#....", "...#....", "...#....", "...#....", "..###...", "........",
    ],
    [
        "..###...", ".#...#..", ".....#..", "....#...", "...#....", "..#.....", ".#####..", "........",
    ],
    [
        "..###...", ".#...#..", ".....#..", "...##...", ".....#..", ".#...#..", "..###...", "........",
    ],
    [
        "....#...", "...##...", "..#.#...", ".#..#...", ".#####..", "....#...", "....#...", "........",
    ],
    [
        ".#####..", ".#......", ".####...", ".....#..", ".....#..", ".#...#..", "..###...", "........",
    ],
    [
        "..###...", ".#......", ".#......", ".####...", ".#...#..", ".#...#..", "..###...", "........",
    ],
    [
        ".#####..", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#....", "........",
    ],
    [
        "..###...", ".#...#..", ".#...#..", "..###...", ".#...#..", ".#...#..", "..###...", "........",
    ],
    [
        "..###...", ".#...#..", ".#...#..", "..####..", ".....#..", ".....#..", "..###...", "........",
    ],
];

/// 8x8 single-channel digit images: glyph templates with a random shift of
/// up to one pixel, random stroke dropout and additive Gaussian noise.
pub fn digit_grid(n: usize, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixel_noise = Normal::new(0.0, noise.max(0.0)).expect("valid std");
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = i % 10;
        let dy: i32 = rng.random_range(-1..=1);
        let dx: i32 = rng.random_range(-1..=1);
        let mut img = vec![0.0; 64];
        for (r, row) in DIGIT_GLYPHS[digit].iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch != b'#' || rng.random_bool(0.1) {
                    continue;
                }
                let (y, x) = (r as i32 + dy, c as i32 + dx);
                if (0..8).contains(&y) && (0..8).contains(&x) {
                    img[(y * 8 + x) as usize] = 1.0;
                }
            }
        }
        img.iter_mut().for_each(|p| *p += pixel_noise.sample(&mut rng));
        features.push(img);
        labels.push(digit);
    }
    let mut ds = Dataset::new(features, labels, 10).expect("well-formed");
    ds.image_shape = Some(ImageShape {
        channels: 1,
        height: 8,
        width: 8,
    });
    ds
}

/// Loads every `*.csv` file in `dir` (sorted by name). Each row is
/// `label,feature_1,...,feature_d` with no header.
pub fn from_directory(dir: &Path, num_classes: usize) -> Result<Dataset> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::config(format!("no .csv files in {}", dir.display())));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for path in files {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(&path)?;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |field: &str| Error::Format {
                what: "dataset csv",
                detail: format!("{}:{}: cannot parse {field:?}", path.display(), line + 1),
            };
            let mut it = rec.iter();
            let label_text = it.next().ok_or_else(|| parse_err(""))?;
            labels.push(label_text.trim().parse::<usize>().map_err(|_| parse_err(label_text))?);
            features.push(
                it.map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(f)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Dataset::new(features, labels, num_classes)
}
