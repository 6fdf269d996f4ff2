//! Dataset handling: synthetic Gaussian-cluster generation, the embedding
//! CSV format, and disjoint train/test label splits.
//!
//! The embedding file is the contract for plugging in features exported by
//! external tools: UTF-8 CSV with header `item_id,label,v0,...,v{d-1}`, one
//! row per item, values in scientific notation with nine fractional digits.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{vector, Prng};

/// One labeled feature vector; the unit the episodic protocol samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub item_id: u64,
    pub label: usize,
    pub vector: Vec<f64>,
}

/// Where a dataset came from, kept for run records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    File(String),
}

/// Immutable collection of embeddings with a per-label index.
#[derive(Debug, Clone)]
pub struct Dataset {
    embeddings: Vec<Embedding>,
    label_set: Vec<usize>,
    dim: usize,
    provenance: Provenance,
    by_label: HashMap<usize, Vec<usize>>,
}

impl Dataset {
    fn build(embeddings: Vec<Embedding>, dim: usize, provenance: Provenance) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        let mut by_label: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, e) in embeddings.iter().enumerate() {
            debug_assert_eq!(e.vector.len(), dim);
            by_label.entry(e.label).or_default().push(i);
        }
        let mut label_set: Vec<usize> = by_label.keys().copied().collect();
        label_set.sort_unstable();
        Ok(Dataset {
            embeddings,
            label_set,
            dim,
            provenance,
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Distinct labels in ascending order.
    pub fn label_set(&self) -> &[usize] {
        &self.label_set
    }

    pub fn get(&self, index: usize) -> &Embedding {
        &self.embeddings[index]
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    /// Dataset indices of the items carrying `label`, in insertion order.
    pub fn items_of(&self, label: usize) -> &[usize] {
        self.by_label.get(&label).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest per-class item count (bounds the feasible shot count).
    pub fn min_items_per_class(&self) -> usize {
        self.label_set
            .iter()
            .map(|l| self.items_of(*l).len())
            .min()
            .unwrap_or(0)
    }
}

/// Parameters of the synthetic Gaussian-cluster benchmark. Class means are
/// drawn uniformly on the unit hypersphere and scaled by
/// `inter_class_scale`; items are the mean plus isotropic Gaussian noise
/// with per-coordinate `intra_class_sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub items_per_class: usize,
    pub dim: usize,
    pub inter_class_scale: f64,
    pub intra_class_sigma: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "synthetic num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.items_per_class < 1 {
            return Err(Error::Config("synthetic items_per_class must be >= 1".into()));
        }
        if self.dim < 1 {
            return Err(Error::Config("synthetic dim must be >= 1".into()));
        }
        if !(self.intra_class_sigma > 0.0) || !self.intra_class_sigma.is_finite() {
            return Err(Error::Config(format!(
                "intra_class_sigma must be positive and finite, got {}",
                self.intra_class_sigma
            )));
        }
        if !(self.inter_class_scale >= 0.0) || !self.inter_class_scale.is_finite() {
            return Err(Error::Config(format!(
                "inter_class_scale must be nonnegative and finite, got {}",
                self.inter_class_scale
            )));
        }
        Ok(())
    }
}

/// Generate the synthetic dataset. Deterministic per seed: class means are
/// drawn first (dim normals each, normalized, scaled), then each item's
/// noise, class by class, item by item.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Prng::new(cfg.seed);
    let mut embeddings = Vec::with_capacity(cfg.num_classes * cfg.items_per_class);
    let mut item_id = 0u64;
    for label in 0..cfg.num_classes {
        let mut mean: Vec<f64> = (0..cfg.dim).map(|_| rng.next_normal()).collect();
        let n = vector::norm(&mean);
        if n <= vector::NORM_FLOOR {
            mean[0] = 1.0; // vanishing direction draw; pick an axis
        } else {
            for v in &mut mean {
                *v /= n;
            }
        }
        for v in &mut mean {
            *v *= cfg.inter_class_scale;
        }
        for _ in 0..cfg.items_per_class {
            let vector: Vec<f64> = mean
                .iter()
                .map(|&m| m + cfg.intra_class_sigma * rng.next_normal())
                .collect();
            embeddings.push(Embedding {
                item_id,
                label,
                vector,
            });
            item_id += 1;
        }
    }
    Dataset::build(embeddings, cfg.dim, Provenance::Synthetic(cfg.clone()))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write a dataset in the embedding CSV format.
pub fn save_embeddings(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("item_id,label");
    for i in 0..ds.dim() {
        write!(header, ",v{i}").unwrap();
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    let mut line = String::new();
    for e in ds.embeddings() {
        line.clear();
        write!(line, "{},{}", e.item_id, e.label).unwrap();
        for v in &e.vector {
            write!(line, ",{v:.9e}").unwrap();
        }
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Load an embedding CSV. Every malformed row is reported with its
/// 1-based line number; dimension and item-id consistency are enforced.
pub fn load_embeddings(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let display = path.display().to_string();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: display.clone(),
        line,
        msg,
    };

    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header = header.map_err(|e| io_err(path, e))?;
    let fields: Vec<&str> = header.trim_end().split(',').collect();
    if fields.len() < 3 || fields[0] != "item_id" || fields[1] != "label" {
        return Err(parse_err(
            1,
            "header must be item_id,label,v0,...".to_string(),
        ));
    }
    let dim = fields.len() - 2;
    for (i, f) in fields[2..].iter().enumerate() {
        if *f != format!("v{i}") {
            return Err(parse_err(1, format!("expected column v{i}, found {f}")));
        }
    }

    let mut embeddings = Vec::new();
    let mut seen_ids: HashMap<u64, usize> = HashMap::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let cols: Vec<&str> = trimmed.split(',').collect();
        if cols.len() != dim + 2 {
            return Err(parse_err(
                lineno,
                format!("expected {} values, found {}", dim + 2, cols.len()),
            ));
        }
        let item_id: u64 = cols[0]
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid item_id {:?}", cols[0])))?;
        if let Some(first) = seen_ids.insert(item_id, lineno) {
            return Err(parse_err(
                lineno,
                format!("duplicate item_id {item_id} (first seen on line {first})"),
            ));
        }
        let label: usize = cols[1]
            .parse()
            .map_err(|_| parse_err(lineno, format!("invalid label {:?}", cols[1])))?;
        let mut vector = Vec::with_capacity(dim);
        for (i, c) in cols[2..].iter().enumerate() {
            let v: f64 = c
                .parse()
                .map_err(|_| parse_err(lineno, format!("invalid value {c:?} in column v{i}")))?;
            if !v.is_finite() {
                return Err(parse_err(lineno, format!("non-finite value in column v{i}")));
            }
            vector.push(v);
        }
        embeddings.push(Embedding {
            item_id,
            label,
            vector,
        });
    }
    if embeddings.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Dataset::build(embeddings, dim, Provenance::File(display))
}

/// Which side of a label split an operation works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitSide {
    Train,
    Test,
}

/// Disjoint train/test label sets. Both sides are stored sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSplit {
    pub train_labels: Vec<usize>,
    pub test_labels: Vec<usize>,
}

impl LabelSplit {
    pub fn side(&self, side: SplitSide) -> &[usize] {
        match side {
            SplitSide::Train => &self.train_labels,
            SplitSide::Test => &self.test_labels,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        // both sorted
        let mut i = 0;
        let mut j = 0;
        while i < self.train_labels.len() && j < self.test_labels.len() {
            match self.train_labels[i].cmp(&self.test_labels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return false,
            }
        }
        true
    }
}

/// Randomly split the dataset's labels. The train side gets
/// floor(fraction · |labels|) classes; the remainder goes to test, which
/// keeps evaluation on the harder (larger) side of the rounding.
pub fn split_labels(ds: &Dataset, train_fraction: f64, rng: &mut Prng) -> Result<LabelSplit> {
    if !train_fraction.is_finite() || train_fraction <= 0.0 || train_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut labels = ds.label_set().to_vec();
    let total = labels.len();
    let n_train = (train_fraction * total as f64).floor() as usize;
    if n_train == 0 {
        return Err(Error::InsufficientClasses {
            side: "train".into(),
            needed: 1,
            available: 0,
            what: format!("floor({train_fraction} * {total} classes) = 0"),
        });
    }
    debug_assert!(n_train < total);
    rng.shuffle(&mut labels);
    let mut train_labels = labels[..n_train].to_vec();
    let mut test_labels = labels[n_train..].to_vec();
    train_labels.sort_unstable();
    test_labels.sort_unstable();
    let split = LabelSplit {
        train_labels,
        test_labels,
    };
    debug_assert!(split.is_disjoint());
    Ok(split)
}
