//! Vicinal augmentation, linear-region interpolation and Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::data::FeatureLayout;
use crate::error::{Error, Result};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    /// Zero-pad, random crop back to size, random horizontal flip.
    ImagePadCropFlip,
    /// Additive Gaussian jitter.
    VectorJitter,
    #[default]
    Identity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    #[serde(default)]
    pub kind: AugmentKind,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub flip_prob: f64,
    #[serde(default)]
    pub jitter_sigma: f64,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self::default()
    }

    /// Pad-crop-flip with the given padding and flip probability 0.5.
    pub fn image(pad: usize) -> Self {
        Self {
            kind: AugmentKind::ImagePadCropFlip,
            pad,
            flip_prob: 0.5,
            jitter_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob must lie in [0, 1], got {}", self.flip_prob)));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "jitter_sigma must be nonnegative, got {}",
                self.jitter_sigma
            )));
        }
        Ok(())
    }
}

/// Applies `policy` to every row of `batch` independently.
///
/// Image rows are channel-major (`C × side × side`). Per sample the image
/// policy draws the vertical offset, the horizontal offset (each uniform in
/// `0..=2·pad`) and then the flip decision, in that order.
pub fn augment(
    batch: &Tensor,
    layout: FeatureLayout,
    policy: &AugmentPolicy,
    rng: &mut impl RandomSource,
) -> Result<Tensor> {
    match policy.kind {
        AugmentKind::Identity => Ok(batch.clone()),
        AugmentKind::VectorJitter => {
            if policy.jitter_sigma == 0.0 {
                return Ok(batch.clone());
            }
            Ok(batch.map(|v| v + policy.jitter_sigma * rng.normal()))
        }
        AugmentKind::ImagePadCropFlip => {
            let FeatureLayout::SquareImage { side, channels } = layout else {
                return Err(Error::Config(
                    "pad/crop/flip augmentation needs a square image feature layout".into(),
                ));
            };
            let (rows, d) = batch.dims2()?;
            if d != side * side * channels {
                return Err(Error::Config(format!(
                    "image layout {channels}x{side}x{side} does not match feature width {d}"
                )));
            }
            let pad = policy.pad as isize;
            let mut out = vec![0.0; rows * d];
            for r in 0..rows {
                let oy = rng.index(2 * policy.pad + 1) as isize - pad;
                let ox = rng.index(2 * policy.pad + 1) as isize - pad;
                let flip = rng.uniform() < policy.flip_prob;
                let src = batch.row(r);
                let dst = &mut out[r * d..(r + 1) * d];
                for c in 0..channels {
                    let plane = c * side * side;
                    for y in 0..side {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= side as isize {
                            continue;
                        }
                        for x in 0..side {
                            let cx = if flip { side - 1 - x } else { x };
                            let sx = cx as isize + ox;
                            if sx < 0 || sx >= side as isize {
                                continue;
                            }
                            dst[plane + y * side + x] = src[plane + sy as usize * side + sx as usize];
                        }
                    }
                }
            }
            Tensor::new(vec![rows, d], out)
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::Domain(format!("interpolation coefficient must lie in [0, 1], got {lambda}")))
    }
}

#[inline]
fn lerp(a: f64, b: f64, lambda: f64) -> f64 {
    // clamping keeps the point inside the segment's bounding box under rounding
    let v = (1.0 - lambda) * a + lambda * b;
    v.clamp(a.min(b), a.max(b))
}

/// Point at fraction `lambda` along the segment from `x_i` to `x_j`, per row.
pub fn interpolate(x_i: &Tensor, x_j: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    x_i.zip_map(x_j, "interpolate", |a, b| lerp(a, b, lambda))
}

/// Like [`interpolate`] but with one coefficient per row.
pub fn interpolate_rows(x_i: &Tensor, x_j: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
    if x_i.shape() != x_j.shape() {
        return Err(Error::shape("interpolate", x_i.shape(), x_j.shape()));
    }
    let (rows, d) = x_i.dims2()?;
    if lambdas.len() != rows {
        return Err(Error::shape("interpolate", &[rows], &[lambdas.len()]));
    }
    let mut out = Vec::with_capacity(rows * d);
    for (r, &l) in lambdas.iter().enumerate() {
        check_lambda(l)?;
        out.extend(x_i.row(r).iter().zip(x_j.row(r)).map(|(&a, &b)| lerp(a, b, l)));
    }
    Tensor::new(vec![rows, d], out)
}

/// One linear-region batch: a single `λ ~ U[0, 1)` shared by every row.
pub fn sample_region_batch(
    batch_i: &Tensor,
    batch_j: &Tensor,
    rng: &mut impl RandomSource,
) -> Result<(Tensor, f64)> {
    if batch_i.shape() != batch_j.shape() {
        return Err(Error::shape("sample_region_batch", batch_i.shape(), batch_j.shape()));
    }
    let lambda = rng.uniform();
    Ok((interpolate(batch_i, batch_j, lambda)?, lambda))
}

/// Per-sample variant of [`sample_region_batch`].
pub fn sample_region_batch_per_sample(
    batch_i: &Tensor,
    batch_j: &Tensor,
    rng: &mut impl RandomSource,
) -> Result<(Tensor, Vec<f64>)> {
    if batch_i.shape() != batch_j.shape() {
        return Err(Error::shape("sample_region_batch", batch_i.shape(), batch_j.shape()));
    }
    let lambdas: Vec<f64> = (0..batch_i.rows()).map(|_| rng.uniform()).collect();
    Ok((interpolate_rows(batch_i, batch_j, &lambdas)?, lambdas))
}

/// `batch + σ·N(0, 1)` elementwise.
pub fn noise_batch(batch: &Tensor, sigma: f64, rng: &mut impl RandomSource) -> Result<Tensor> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(batch.clone());
    }
    Ok(batch.map(|v| v + sigma * rng.normal()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    /// Always returns the same uniform draw.
    struct Fixed(f64);

    impl RandomSource for Fixed {
        fn uniform(&mut self) -> f64 {
            self.0
        }
        fn normal(&mut self) -> f64 {
            0.0
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    #[test]
    fn identity_policy_is_identity() {
        let x = random(3, 5, 1);
        let y = augment(&x, FeatureLayout::FlatVector, &AugmentPolicy::identity(), &mut Rng::new(0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn centred_crop_recovers_image() {
        let x = random(2, 28 * 28, 2);
        let policy = AugmentPolicy { flip_prob: 0.0, ..AugmentPolicy::image(4) };
        let layout = FeatureLayout::SquareImage { side: 28, channels: 1 };
        let y = augment(&x, layout, &policy, &mut Fixed(0.5)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn flip_mirrors_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let policy = AugmentPolicy { flip_prob: 1.0, ..AugmentPolicy::image(1) };
        let layout = FeatureLayout::SquareImage { side: 2, channels: 1 };
        let y = augment(&x, layout, &policy, &mut Fixed(0.5)).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0, 4.0, 3.0]);
    }

    #[test]
    fn corner_crop_shifts_in_zeros() {
        // offset index 0 means shift by -pad: output pixel (y, x) reads (y-1, x-1)
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let policy = AugmentPolicy { flip_prob: 0.0, ..AugmentPolicy::image(1) };
        let layout = FeatureLayout::SquareImage { side: 2, channels: 1 };
        let y = augment(&x, layout, &policy, &mut Fixed(0.0)).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn image_policy_needs_image_layout() {
        let x = random(1, 4, 3);
        let r = augment(&x, FeatureLayout::FlatVector, &AugmentPolicy::image(1), &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn augment_is_deterministic_under_restored_state() {
        let x = random(4, 16, 4);
        let layout = FeatureLayout::SquareImage { side: 4, channels: 1 };
        let rng = Rng::new(10);
        let a = augment(&x, layout, &AugmentPolicy::image(2), &mut rng.clone()).unwrap();
        let b = augment(&x, layout, &AugmentPolicy::image(2), &mut rng.clone()).unwrap();
        assert_eq!(a, b);
        let jitter = AugmentPolicy { kind: AugmentKind::VectorJitter, jitter_sigma: 0.1, ..Default::default() };
        let a = augment(&x, layout, &jitter, &mut rng.clone()).unwrap();
        let b = augment(&x, layout, &jitter, &mut rng.clone()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn interpolate_endpoints_and_arithmetic() {
        let a = random(3, 4, 5);
        let b = random(3, 4, 6);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate(&a, &b, 1.0).unwrap(), b);
        let p = interpolate(
            &Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            &Tensor::from_rows(&[vec![2.0, 4.0]]).unwrap(),
            0.25,
        )
        .unwrap();
        assert_eq!(p.data(), &[0.5, 1.0]);
        let mid = interpolate(&a, &b, 0.5).unwrap();
        let expected = a.add(&b).unwrap().scale(0.5);
        for (m, e) in mid.data().iter().zip(expected.data()) {
            assert!((m - e).abs() <= 1e-15);
        }
    }

    #[test]
    fn interpolate_rejects_lambda_outside_unit_interval() {
        let a = random(1, 2, 7);
        assert!(matches!(interpolate(&a, &a, 1.5), Err(Error::Domain(_))));
        assert!(matches!(interpolate(&a, &a, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn region_batch_with_stub() {
        let a = random(4, 3, 8);
        let b = random(4, 3, 9);
        let (x0, l0) = sample_region_batch(&a, &b, &mut Fixed(0.0)).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(x0, a);
        let (xh, lh) = sample_region_batch(&a, &b, &mut Fixed(0.5)).unwrap();
        assert_eq!(lh, 0.5);
        assert_eq!(xh, interpolate(&a, &b, 0.5).unwrap());
    }

    #[test]
    fn region_batch_shape_mismatch() {
        let r = sample_region_batch(&random(2, 3, 1), &random(3, 3, 1), &mut Rng::new(0));
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn per_sample_lambdas_differ() {
        let a = random(5, 2, 1);
        let b = random(5, 2, 2);
        let (x, ls) = sample_region_batch_per_sample(&a, &b, &mut Rng::new(3)).unwrap();
        assert_eq!(ls.len(), 5);
        assert!(ls.windows(2).any(|w| w[0] != w[1]));
        assert_eq!(x, interpolate_rows(&a, &b, &ls).unwrap());
    }

    #[test]
    fn noise_zero_sigma_is_identity() {
        let x = random(3, 3, 1);
        assert_eq!(noise_batch(&x, 0.0, &mut Rng::new(0)).unwrap(), x);
    }

    #[test]
    fn noise_is_reproducible() {
        let x = random(3, 3, 1);
        let a = noise_batch(&x, 0.05, &mut Rng::new(12)).unwrap();
        let b = noise_batch(&x, 0.05, &mut Rng::new(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
    }

    #[test]
    fn noise_standard_deviation() {
        let n = 1_000_000;
        let x = Tensor::zeros(&[1000, 1000]);
        let y = noise_batch(&x, 0.1, &mut Rng::new(2024)).unwrap();
        let mean = y.sum() / n as f64;
        let var = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var.sqrt() - 0.1).abs() / 0.1 < 0.01);
    }

    proptest! {
        #[test]
        fn interpolation_stays_in_bounding_box(
            pts in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20),
            lambda in 0.0f64..=1.0,
        ) {
            let a = Tensor::vector(pts.iter().map(|p| p.0).collect());
            let b = Tensor::vector(pts.iter().map(|p| p.1).collect());
            let c = interpolate(&a, &b, lambda).unwrap();
            for ((&x, &y), &z) in a.data().iter().zip(b.data()).zip(c.data()) {
                prop_assert!(x.min(y) <= z && z <= x.max(y));
            }
            prop_assert_eq!(interpolate(&a, &a, lambda).unwrap(), a);
        }
    }
}
