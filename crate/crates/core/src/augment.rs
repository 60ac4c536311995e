//! Random-mixing augmentation for vector inputs.
//!
//! Each call draws fresh random affine units (followed by `tanh`), mixes
//! their outputs with the untouched input using Dirichlet weights and adds
//! Gaussian noise.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    #[default]
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub n_transforms: usize,
    pub mix_concentration: f64,
    pub noise_sigma: f64,
    pub identity_slot: bool,
    pub resample: Resample,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_transforms: 4,
            mix_concentration: 1.0,
            noise_sigma: 0.1,
            identity_slot: true,
            resample: Resample::PerBatch,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_transforms == 0 {
            return Err(invalid("n_transforms must be >= 1"));
        }
        if !(self.mix_concentration > 0.0) {
            return Err(invalid("mix_concentration must be > 0"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(invalid("noise_sigma must be >= 0"));
        }
        Ok(())
    }
}

/// One mixing component.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Identity,
    /// `x -> W x`, optionally followed by `tanh`. `W` is `d x d`, applied to
    /// row vectors as `x W^T`.
    Affine {
        weight: Array2<f64>,
        squash: bool,
    },
}

impl Transform {
    fn apply(&self, batch: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            Transform::Identity => batch.to_owned(),
            Transform::Affine { weight, squash } => {
                let out = batch.dot(&weight.t());
                if *squash {
                    out.mapv(f64::tanh)
                } else {
                    out
                }
            }
        }
    }
}

/// `w ~ Dirichlet(concentration, ..., concentration)` via normalized gammas.
pub fn sample_mixing_weights(n: usize, concentration: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| invalid(e.to_string()))?;
    loop {
        let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            return Ok(draws.into_iter().map(|g| g / sum).collect());
        }
    }
}

/// Random `d x d` map with `N(0, 1/d)` entries, squashed by `tanh`.
pub fn sample_transform(d: usize, rng: &mut Rng) -> Transform {
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
    Transform::Affine {
        weight: Array2::from_shape_simple_fn((d, d), || normal.sample(rng)),
        squash: true,
    }
}

/// `sum_i w_i T_i(x) + noise`. The noise draw is skipped entirely when
/// `noise_sigma` is zero.
pub fn mix(
    batch: ArrayView2<'_, f64>,
    transforms: &[Transform],
    weights: &[f64],
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    if batch.nrows() == 0 {
        return Err(invalid("cannot augment an empty batch"));
    }
    if transforms.len() != weights.len() || transforms.is_empty() {
        return Err(invalid("need one weight per transform"));
    }
    let mut out = Array2::zeros(batch.raw_dim());
    for (t, &w) in transforms.iter().zip(weights) {
        if w != 0.0 {
            out.scaled_add(w, &t.apply(batch));
        }
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
        out.mapv_inplace(|v| v + normal.sample(rng));
    }
    Ok(out)
}

pub fn randmix(
    batch: ArrayView2<'_, f64>,
    config: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Array2<f64>> {
    if batch.nrows() == 0 {
        return Err(invalid("cannot augment an empty batch"));
    }
    config.validate()?;
    let d = batch.ncols();
    let mut transforms = Vec::with_capacity(config.n_transforms + 1);
    if config.identity_slot {
        transforms.push(Transform::Identity);
    }
    transforms.extend((0..config.n_transforms).map(|_| sample_transform(d, rng)));
    let weights = sample_mixing_weights(transforms.len(), config.mix_concentration, rng)?;
    mix(batch, &transforms, &weights, config.noise_sigma, rng)
}
