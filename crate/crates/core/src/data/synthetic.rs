use serde::{Deserialize, Serialize};

use super::{Dataset, FeatureLayout};
use crate::error::{Error, Result};
use crate::model::{Mlp, MlpSpec};
use crate::rng::{tag, RandomSource, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticKind {
    /// Each class is a mixture of isotropic Gaussians whose centres lie in a
    /// cube and are at least `separation` apart. The cube half-width is
    /// `extent · separation · (K·modes)^(1/d)`.
    GaussianMixture {
        modes_per_class: usize,
        separation: f64,
        spread: f64,
        #[serde(default = "default_extent")]
        extent: f64,
    },
    /// Interleaved spiral arms in the first two coordinates.
    TwoSpirals { turns: f64, noise: f64 },
    /// Uniform inputs in `[-1, 1]^d` labelled by a frozen random network.
    TeacherLabeled { hidden: usize },
}

fn default_extent() -> f64 {
    0.75
}

impl SyntheticKind {
    pub fn gaussian_mixture(modes_per_class: usize, separation: f64, spread: f64) -> Self {
        SyntheticKind::GaussianMixture {
            modes_per_class,
            separation,
            spread,
            extent: default_extent(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::GaussianMixture { .. } => "gaussian_mixture",
            SyntheticKind::TwoSpirals { .. } => "two_spirals",
            SyntheticKind::TeacherLabeled { .. } => "teacher_labeled",
        }
    }
}

/// Generates `n` labelled samples. Deterministic in `seed`.
///
/// Class counts differ by at most one.
pub fn gen_synthetic(kind: &SyntheticKind, n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least two classes, got {classes}")));
    }
    if d == 0 {
        return Err(Error::Config("feature dimension must be positive".into()));
    }
    if n < 10 * classes {
        return Err(Error::Config(format!("need n >= 10·K = {}, got {n}", 10 * classes)));
    }
    let root = Rng::new(seed);
    let (rows, labels) = match *kind {
        SyntheticKind::GaussianMixture {
            modes_per_class,
            separation,
            spread,
            extent,
        } => gaussian_mixture(&root, n, d, classes, modes_per_class, separation, spread, extent)?,
        SyntheticKind::TwoSpirals { turns, noise } => spirals(&root, n, d, classes, turns, noise)?,
        SyntheticKind::TeacherLabeled { hidden } => teacher_labeled(&root, n, d, classes, hidden)?,
    };

    // interleave classes in a seeded order
    let perm = root.split(tag("order")).permutation(n);
    let mut data = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for &p in &perm {
        data.extend_from_slice(&rows[p]);
        ys.push(labels[p]);
    }
    Dataset::new(kind.name(), Tensor::new(vec![n, d], data)?, ys, classes, FeatureLayout::FlatVector)
}

type Samples = (Vec<Vec<f64>>, Vec<usize>);

#[allow(clippy::too_many_arguments)]
fn gaussian_mixture(
    root: &Rng,
    n: usize,
    d: usize,
    classes: usize,
    modes: usize,
    separation: f64,
    spread: f64,
    extent: f64,
) -> Result<Samples> {
    if modes == 0 || !(separation > 0.0) || !(spread >= 0.0) || !(extent > 0.0) {
        return Err(Error::Config(
            "gaussian_mixture needs modes_per_class >= 1, separation > 0, spread >= 0, extent > 0".into(),
        ));
    }
    let total = classes * modes;
    let half = extent * separation * (total as f64).powf(1.0 / d as f64);
    let mut rng = root.split(tag("centres"));
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut attempts = 0;
    while centres.len() < total {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config("could not place well-separated mixture centres".into()));
        }
        let c: Vec<f64> = (0..d).map(|_| half * (2.0 * rng.uniform() - 1.0)).collect();
        let ok = centres
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= separation * separation);
        if ok {
            centres.push(c);
        }
    }
    let mut rng = root.split(tag("points"));
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        let m = rng.index(modes);
        let c = &centres[y * modes + m];
        rows.push(c.iter().map(|&v| v + spread * rng.normal()).collect());
        labels.push(y);
    }
    Ok((rows, labels))
}

fn spirals(root: &Rng, n: usize, d: usize, classes: usize, turns: f64, noise: f64) -> Result<Samples> {
    if d < 2 {
        return Err(Error::Config("two_spirals needs d >= 2".into()));
    }
    let mut rng = root.split(tag("spirals"));
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let y = i % classes;
        let t = rng.uniform();
        let radius = 0.1 + 0.9 * t;
        let angle = tau * (turns * t + y as f64 / classes as f64);
        let mut row = vec![radius * angle.cos(), radius * angle.sin()];
        for v in &mut row {
            *v += noise * rng.normal();
        }
        row.extend((2..d).map(|_| noise * rng.normal()));
        rows.push(row);
        labels.push(y);
    }
    Ok((rows, labels))
}

fn teacher_labeled(root: &Rng, n: usize, d: usize, classes: usize, hidden: usize) -> Result<Samples> {
    let spec = MlpSpec::new(vec![d, hidden.max(1), classes])?;
    let mut net = Mlp::init(&spec, root.split(tag("reference")).seed())?;

    // centre each class logit over the input cube so no class is starved
    let mut rng = root.split(tag("calibration"));
    let calib: Vec<f64> = (0..4096 * d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let logits = net.forward(&Tensor::new(vec![4096, d], calib)?)?;
    let means = logits.sum_rows()?.scale(1.0 / 4096.0);
    let last = net.layers.last_mut().unwrap();
    last.bias = last.bias.sub(&means)?;

    let mut quota: Vec<usize> = (0..classes).map(|k| n / classes + usize::from(k < n % classes)).collect();
    let mut rng = root.split(tag("inputs"));
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while rows.len() < n {
        attempts += 1;
        if attempts > 1000 * n {
            return Err(Error::Config(
                "reference network assigns too little volume to some class; try another seed".into(),
            ));
        }
        let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let y = net.forward(&Tensor::new(vec![1, d], x.clone())?)?.argmax_rows()[0];
        if quota[y] > 0 {
            quota[y] -= 1;
            rows.push(x);
            labels.push(y);
        }
    }
    Ok((rows, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm() -> SyntheticKind {
        SyntheticKind::gaussian_mixture(1, 4.0, 0.5)
    }

    #[test]
    fn same_seed_same_dataset() {
        for kind in [gm(), SyntheticKind::TwoSpirals { turns: 1.0, noise: 0.05 }, SyntheticKind::TeacherLabeled { hidden: 16 }] {
            let a = gen_synthetic(&kind, 200, 3, 4, 5).unwrap();
            let b = gen_synthetic(&kind, 200, 3, 4, 5).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, gen_synthetic(&kind, 200, 3, 4, 6).unwrap());
        }
    }

    #[test]
    fn class_histograms_are_balanced() {
        for kind in [gm(), SyntheticKind::TwoSpirals { turns: 1.5, noise: 0.1 }, SyntheticKind::TeacherLabeled { hidden: 32 }] {
            let ds = gen_synthetic(&kind, 1000, 4, 5, 1).unwrap();
            for c in ds.class_counts() {
                assert!((c as f64 - 200.0).abs() <= 0.2 * 200.0, "{kind:?}: {c}");
            }
        }
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(gen_synthetic(&gm(), 19, 2, 2, 0).is_err());
        assert!(gen_synthetic(&gm(), 20, 2, 2, 0).is_ok());
    }

    #[test]
    fn mixture_centres_are_separated() {
        let ds = gen_synthetic(&gm(), 400, 2, 2, 3).unwrap();
        let mut means = [[0.0; 2]; 2];
        for (i, &y) in ds.labels.iter().enumerate() {
            means[y][0] += ds.features.row(i)[0] / 200.0;
            means[y][1] += ds.features.row(i)[1] / 200.0;
        }
        let dist = ((means[0][0] - means[1][0]).powi(2) + (means[0][1] - means[1][1]).powi(2)).sqrt();
        assert!(dist > 3.5, "{dist}");
    }
}
