//! Labeled feature datasets: the universe for kNN search and training.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A dense feature matrix with one integer class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    /// Builds a dataset from a flat row-major feature buffer.
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::rejected("feature dimension must be positive"));
        }
        if labels.is_empty() {
            return Err(Error::rejected("dataset must contain at least one row"));
        }
        if class_count < 2 {
            return Err(Error::rejected("class count must be at least 2"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::rejected(format!(
                "feature buffer holds {} values, expected {} rows x {} dims",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::rejected(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(LabeledDataset {
            features,
            dim,
            labels,
            class_count,
        })
    }

    /// Builds a dataset from per-row feature vectors.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::rejected("dataset must contain at least one row"));
        }
        let dim = rows[0].len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::rejected(format!(
                "row {i} has dimension {}, expected {dim}",
                r.len()
            )));
        }
        if rows.len() != labels.len() {
            return Err(Error::rejected(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut features = Vec::with_capacity(rows.len() * dim);
        for r in &rows {
            features.extend_from_slice(r);
        }
        Self::new(features, dim, labels, class_count)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    /// Row indices of every member of class `c`, in row order.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    /// Number of rows carrying each label.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0usize; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// New dataset holding the given rows (order preserved, duplicates allowed).
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::rejected("subset must keep at least one row"));
        }
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::rejected(format!(
                    "subset index {i} out of range for {} rows",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.class_count)
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        let indices: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&indices)
    }

    /// Row indices of a seeded class-stratified sample: `per_class` rows drawn
    /// uniformly without replacement from each class, returned in row order.
    pub fn stratified_indices(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        let mut keep = Vec::with_capacity(per_class * self.class_count);
        for c in 0..self.class_count {
            let mut ids = self.class_indices(c);
            if ids.len() < per_class {
                return Err(Error::rejected(format!(
                    "class {c} has {} rows, need {per_class}",
                    ids.len()
                )));
            }
            ids.shuffle(rng);
            keep.extend_from_slice(&ids[..per_class]);
        }
        keep.sort_unstable();
        Ok(keep)
    }
}

/// Samples a 2-D Gaussian mixture with `class_count` means spaced evenly on a
/// circle, clipped into the unit box so it is attackable like image data.
pub fn gaussian_mixture_2d(
    per_class: usize,
    class_count: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledDataset> {
    if per_class == 0 || class_count < 2 {
        return Err(Error::rejected("need per_class >= 1 and class_count >= 2"));
    }
    let mut rows = Vec::with_capacity(per_class * class_count);
    let mut labels = Vec::with_capacity(per_class * class_count);
    for c in 0..class_count {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / class_count as f64;
        let (mx, my) = (0.5 + 0.25 * angle.cos(), 0.5 + 0.25 * angle.sin());
        for _ in 0..per_class {
            // Box-Muller from the stream keeps the draw deterministic.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let r = (-2.0 * u1.ln()).sqrt();
            let (z0, z1) = (
                r * (2.0 * std::f64::consts::PI * u2).cos(),
                r * (2.0 * std::f64::consts::PI * u2).sin(),
            );
            rows.push(vec![
                (mx + sigma * z0).clamp(0.0, 1.0),
                (my + sigma * z1).clamp(0.0, 1.0),
            ]);
            labels.push(c);
        }
    }
    // interleave the classes so contiguous batches stay class-mixed
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let rows = order.iter().map(|&i| rows[i].clone()).collect();
    let labels = order.iter().map(|&i| labels[i]).collect();
    LabeledDataset::from_rows(rows, labels, class_count)
}
