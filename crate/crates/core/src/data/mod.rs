//! Datasets, splits, few-shot subsampling and batch order.

mod idx;
mod manifest;
mod synthetic;

pub use idx::{load_idx, parse_idx_images, parse_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use manifest::{DatasetManifest, ManifestEntry};
pub use synthetic::{gen_synthetic, SyntheticKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{tag, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureLayout {
    #[default]
    FlatVector,
    /// Channel-major `channels × side × side` pixels.
    SquareImage { side: usize, channels: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub layout: FeatureLayout,
}

impl Dataset {
    /// Checks `labels ∈ [0, K)`, row count, and that every class occurs.
    pub fn new(
        name: impl Into<String>,
        features: Tensor,
        labels: Vec<usize>,
        classes: usize,
        layout: FeatureLayout,
    ) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} feature rows but {} labels", labels.len())));
        }
        let counts = class_counts(&labels, classes)?;
        if let Some(missing) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!("class {missing} has no samples")));
        }
        Ok(Self {
            name: name.into(),
            features,
            labels,
            classes,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        class_counts(&self.labels, self.classes).expect("validated at construction")
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.name.clone(),
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.layout,
        )
    }

    /// Row indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

fn class_counts(labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    let mut counts = vec![0; classes];
    for &y in labels {
        if y >= classes {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        counts[y] += 1;
    }
    Ok(counts)
}

/// Stratified train/test split. Each class contributes `round(f · count)`
/// samples to train, clamped so that both sides keep at least one.
pub fn split_indices(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let base = Rng::new(seed).split(tag("split"));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, members) in ds.indices_by_class().into_iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Data(format!("class {k} needs at least two samples to split")));
        }
        let mut rng = base.split(k as u64);
        let perm = rng.permutation(members.len());
        let take = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        for (pos, &p) in perm.iter().enumerate() {
            if pos < take {
                train.push(members[p]);
            } else {
                test.push(members[p]);
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (tr, te) = split_indices(ds, train_fraction, seed)?;
    Ok((ds.subset(&tr)?, ds.subset(&te)?))
}

/// Stratified subsample keeping `floor(fraction · count_k)` rows of each
/// class. Returned indices are ascending.
pub fn few_shot_indices(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction must lie in (0, 1], got {fraction}")));
    }
    if fraction == 1.0 {
        return Ok((0..ds.len()).collect());
    }
    let base = Rng::new(seed).split(tag("few_shot"));
    let mut keep = Vec::new();
    for (k, members) in ds.indices_by_class().into_iter().enumerate() {
        let take = (fraction * members.len() as f64).floor() as usize;
        if take == 0 {
            return Err(Error::Data(format!(
                "fraction {fraction} leaves no samples of class {k} ({} available)",
                members.len()
            )));
        }
        let perm = base.split(k as u64).permutation(members.len());
        keep.extend(perm[..take].iter().map(|&p| members[p]));
    }
    keep.sort_unstable();
    Ok(keep)
}

pub fn few_shot_subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    ds.subset(&few_shot_indices(ds, fraction, seed)?)
}

/// Shuffled mini-batches for one epoch; the last batch may be short.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let perm = Rng::new(seed).split(tag("batches")).split(epoch as u64).permutation(n);
    Ok(perm.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Per-channel mean/std fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        let (channels, plane) = channel_geometry(ds.layout, ds.dim());
        let mut mean = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let count = (ds.len() * plane) as f64;
        for r in 0..ds.len() {
            let row = ds.features.row(r);
            for c in 0..channels {
                for &v in &row[c * plane..(c + 1) * plane] {
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let mut std = vec![0.0; channels];
        for c in 0..channels {
            mean[c] /= count;
            let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
            std[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let (channels, plane) = channel_geometry(ds.layout, ds.dim());
        if channels != self.mean.len() || channels != self.std.len() {
            return Err(Error::Data(format!(
                "standardization has {} channels, dataset has {channels}",
                self.mean.len()
            )));
        }
        let mut out = ds.clone();
        let d = ds.dim();
        for (i, v) in out.features.data_mut().iter_mut().enumerate() {
            let c = (i % d) / plane;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        Ok(out)
    }
}

fn channel_geometry(layout: FeatureLayout, dim: usize) -> (usize, usize) {
    match layout {
        FeatureLayout::SquareImage { side, channels } => (channels, side * side),
        FeatureLayout::FlatVector => (1, dim),
    }
}
