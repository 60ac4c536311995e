//! Source-free adaptation of the DA model to one target domain.
//!
//! The DA model starts from the previous DG parameters, keeps its head
//! frozen, and trains the extractor on information maximization plus
//! cross-entropy against centroid pseudo-labels that are refreshed every few
//! epochs.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::generalize::PseudoLabeledDataset;
use crate::nnmodel::{self, argmax, ClassifierParams, Sgd};
use crate::objective::{entropy, Erm, InfoMax, Objective, Weighted};
use crate::rng::Rng;
use crate::train::{shuffled_batches, EpochReport, Phase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub im_weight: f64,
    /// Weight of the centroid pseudo-label cross-entropy.
    pub pl_weight: f64,
    pub pl_refresh_interval: usize,
    pub distance: Distance,
    pub clip_eps: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            im_weight: 1.0,
            pl_weight: 0.3,
            pl_refresh_interval: 5,
            distance: Distance::Cosine,
            clip_eps: 1e-7,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid("adapt.lr must be > 0"));
        }
        if self.batch_size == 0 || self.pl_refresh_interval == 0 {
            return Err(invalid(
                "adapt.batch_size and adapt.pl_refresh_interval must be >= 1",
            ));
        }
        if !(self.im_weight >= 0.0 && self.pl_weight >= 0.0) {
            return Err(invalid("adapt loss weights must be >= 0"));
        }
        Ok(())
    }
}

/// `H_cond - H_marg` over a batch of probability rows (natural log).
pub fn im_loss(probs: ArrayView2<'_, f64>) -> Result<f64> {
    if probs.nrows() == 0 {
        return Err(invalid("im_loss needs at least one row"));
    }
    for (i, row) in probs.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("row {i} is not a probability vector")));
        }
    }
    let h_cond = probs
        .rows()
        .into_iter()
        .map(|r| entropy(&r.to_vec()))
        .sum::<f64>()
        / probs.nrows() as f64;
    let mean = probs.mean_axis(ndarray::Axis(0)).expect("nonempty");
    Ok(h_cond - entropy(mean.as_slice().expect("contiguous")))
}

fn cosine_distance(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(&b) / (na * nb)
}

fn nearest_centroid(feats: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    feats
        .rows()
        .into_iter()
        .map(|f| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, c) in centroids.rows().into_iter().enumerate() {
                let d = cosine_distance(f, c);
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Two-round centroid labeling on extractor features.
///
/// Round one weights every sample's features by its softmax probability per
/// class; round two recomputes centroids from the round-one hard
/// assignments. Classes left empty keep their round-one centroid.
pub fn centroid_pseudo_labels(params: &ClassifierParams, dataset: &Dataset) -> Result<Vec<usize>> {
    centroid_labels_for(params, dataset.features())
}

pub(crate) fn centroid_labels_for(
    params: &ClassifierParams,
    x: ArrayView2<'_, f64>,
) -> Result<Vec<usize>> {
    if x.nrows() == 0 {
        return Err(invalid("empty dataset"));
    }
    let feats = nnmodel::features(params, x)?;
    let probs = nnmodel::softmax_rows(nnmodel::head(params, feats.view()).view());
    let k = params.config().k;

    // (k x n) . (n x f) -> weighted sums per class
    let weighted = probs.t().dot(&feats);
    let mass = probs.sum_axis(ndarray::Axis(0));
    let mut centroids = weighted;
    for (mut row, &m) in centroids.rows_mut().into_iter().zip(mass.iter()) {
        if m > 0.0 {
            row /= m;
        }
    }
    let first = nearest_centroid(&feats, &centroids);

    let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
    let mut counts = Array1::<f64>::zeros(k);
    for (f, &label) in feats.rows().into_iter().zip(&first) {
        sums.row_mut(label).scaled_add(1.0, &f);
        counts[label] += 1.0;
    }
    for c in 0..k {
        if counts[c] > 0.0 {
            let mean = &sums.row(c) / counts[c];
            centroids.row_mut(c).assign(&mean);
        }
    }
    Ok(nearest_centroid(&feats, &centroids))
}

/// Adapts a copy of `dg_params` to `target`. Only extractor blocks change.
pub fn adapt_domain(
    dg_params: &ClassifierParams,
    target: &Dataset,
    config: &AdaptConfig,
    rng: &mut Rng,
) -> Result<ClassifierParams> {
    adapt_domain_with(dg_params, target, config, rng, &mut |_, _| Ok(()))
}

pub fn adapt_domain_with(
    dg_params: &ClassifierParams,
    target: &Dataset,
    config: &AdaptConfig,
    rng: &mut Rng,
    on_epoch: &mut dyn FnMut(&EpochReport, &ClassifierParams) -> Result<()>,
) -> Result<ClassifierParams> {
    config.validate()?;
    if target.is_empty() {
        return Err(invalid("cannot adapt to an empty target"));
    }
    if target.d() != dg_params.config().d {
        return Err(invalid("target dimension does not match the model"));
    }
    let mut params = dg_params.clone();
    let mut opt = Sgd::new(config.lr, config.momentum);
    let x = target.features();
    let mut pseudo = Vec::new();
    for epoch in 0..config.epochs {
        if epoch % config.pl_refresh_interval == 0 {
            pseudo = centroid_labels_for(&params, x)?;
        }
        let mut total = 0.0;
        let mut batches = 0;
        for batch in shuffled_batches(target.len(), config.batch_size, rng) {
            let xb = x.select(ndarray::Axis(0), &batch);
            let labels: Vec<usize> = batch.iter().map(|&i| pseudo[i]).collect();
            let ce = Erm::cross_entropy(&labels, config.clip_eps);
            let objective = Weighted(vec![
                (config.im_weight, &InfoMax as &dyn Objective),
                (config.pl_weight, &ce),
            ]);
            let (loss, grads) = nnmodel::gradient(&objective, &params, xb.view(), true)?;
            opt.step(&mut params, &grads, true);
            total += loss;
            batches += 1;
        }
        let report = EpochReport {
            epoch,
            phase: Phase::Adapt,
            mean_loss: total / batches as f64,
        };
        on_epoch(&report, &params)?;
    }
    Ok(params)
}

/// Argmax pseudo-labels of the adapted model with their confidences.
pub fn generate_pseudo_labels(
    da_params: &ClassifierParams,
    target: &Dataset,
) -> Result<PseudoLabeledDataset> {
    let logits = nnmodel::forward(da_params, target.features())?;
    let probs = nnmodel::softmax_rows(logits.view());
    let mut labels = Vec::with_capacity(target.len());
    let mut confidences = Vec::with_capacity(target.len());
    for row in probs.rows() {
        let row = row.as_slice().expect("contiguous");
        let label = argmax(row);
        labels.push(label);
        confidences.push(row[label]);
    }
    PseudoLabeledDataset::new(target.clone(), labels, confidences)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_clusters_from_means, DomainKind, DomainSpec, Sample};
    use crate::nnmodel::{init_params, ModelConfig};
    use crate::rng::from_seed;
    use ndarray::array;

    #[test]
    fn im_loss_examples() {
        let uniform = Array2::from_elem((4, 3), 1.0 / 3.0);
        assert!(im_loss(uniform.view()).unwrap().abs() < 1e-12);

        let one_hot = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!((im_loss(one_hot.view()).unwrap() + 3f64.ln()).abs() < 1e-12);

        let p = array![[0.9, 0.1], [0.1, 0.9]];
        let h_cond = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h_cond - 0.3251).abs() < 1e-4);
        let loss = im_loss(p.view()).unwrap();
        assert!((loss - (h_cond - 2f64.ln())).abs() < 1e-12);
        assert!((loss + 0.3680).abs() < 1e-4, "{loss}");

        assert!(im_loss(array![[0.5, 0.6]].view()).is_err());
    }

    #[test]
    fn im_loss_matches_logit_objective() {
        let z = array![[0.2, -1.0, 0.7], [1.5, 0.1, -0.3]];
        let probs = nnmodel::softmax_rows(z.view());
        let (obj, _) = InfoMax.loss_and_grad(z.view()).unwrap();
        assert!((obj - im_loss(probs.view()).unwrap()).abs() < 1e-12);
    }

    fn two_cluster_setup() -> (ClassifierParams, Dataset) {
        let cfg = ModelConfig {
            d: 2,
            hidden: vec![],
            feat_dim: 2,
            k: 2,
        };
        let mut p = ClassifierParams::zeros(&cfg);
        p.extractor[0].weight = array![[1.0, 0.0], [0.0, 1.0]];
        p.head.weight = array![[1.0, -1.0], [0.2, 0.0]];
        let spec = DomainSpec {
            id: 0,
            kind: DomainKind::SyntheticRotated,
            rotation_angle: 0.0,
            noise_sigma: 0.1,
            scale: 1.0,
            shift: vec![],
            seed: 5,
            path: None,
        };
        let ds = make_clusters_from_means(&spec, 40, &[vec![2.0, 0.5], vec![-2.0, 0.5]]).unwrap();
        (p, ds)
    }

    #[test]
    fn centroid_labels_recover_separated_clusters() {
        let (p, ds) = two_cluster_setup();
        let labels = centroid_pseudo_labels(&p, &ds).unwrap();
        assert_eq!(labels, ds.labels().unwrap());
    }

    #[test]
    fn identical_samples_share_a_label() {
        let cfg = ModelConfig {
            d: 3,
            hidden: vec![4],
            feat_dim: 3,
            k: 3,
        };
        let p = init_params(&cfg, &mut from_seed(1)).unwrap();
        let samples = (0..6)
            .map(|_| Sample {
                features: vec![0.4, -0.2, 1.0],
                label: None,
                domain_id: 1,
            })
            .collect();
        let ds = Dataset::new(samples, 3, 3).unwrap();
        let labels = centroid_pseudo_labels(&p, &ds).unwrap();
        assert!(labels.iter().all(|&l| l == labels[0]));
    }

    #[test]
    fn zero_epochs_is_identity_and_head_stays_frozen() {
        let (p, ds) = two_cluster_setup();
        let cfg = AdaptConfig {
            epochs: 0,
            ..AdaptConfig::default()
        };
        let out = adapt_domain(&p, &ds.hide_labels(), &cfg, &mut from_seed(0)).unwrap();
        assert_eq!(out, p);

        let cfg = AdaptConfig {
            epochs: 3,
            batch_size: 8,
            ..AdaptConfig::default()
        };
        let out = adapt_domain(&p, &ds.hide_labels(), &cfg, &mut from_seed(0)).unwrap();
        assert_eq!(out.head, p.head);
        assert_ne!(out.extractor, p.extractor);
    }

    #[test]
    fn pseudo_label_examples() {
        let cfg = ModelConfig {
            d: 3,
            hidden: vec![],
            feat_dim: 3,
            k: 3,
        };
        let mut p = ClassifierParams::zeros(&cfg);
        p.extractor[0].weight = Array2::eye(3);
        p.head.weight = Array2::eye(3);
        let samples = vec![
            Sample {
                features: vec![10.0, 0.0, 0.0],
                label: None,
                domain_id: 1,
            },
            Sample {
                features: vec![1.0, 1.0, 0.0],
                label: None,
                domain_id: 1,
            },
            Sample {
                features: vec![0.0, 2.0, 2.0],
                label: None,
                domain_id: 1,
            },
        ];
        let ds = Dataset::new(samples, 3, 3).unwrap();
        let pl = generate_pseudo_labels(&p, &ds).unwrap();
        assert_eq!(pl.pseudo_labels, vec![0, 0, 1]);
        assert!(pl.confidences.iter().all(|&c| c > 0.0 && c <= 1.0));
    }
}
