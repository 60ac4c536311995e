//! DG model training: augmented ERM on the labeled source, then per target
//! domain ERM on pseudo-labels plus replay, distillation from the previous
//! DG model, and the SelNLPL schedule for noisy pseudo-labels.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IteratorRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{randmix, AugmentConfig};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::nnmodel::{self, ClassifierParams, Sgd};
use crate::objective::{Distillation, Erm, Objective, SampleTerm, Weighted};
use crate::replay::{LabelKind, ReplayBuffer};
use crate::rng::Rng;
use crate::train::{shuffled_batches, EpochReport, Phase};

/// Target samples paired with labels predicted by the DA model.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledDataset {
    pub samples: Dataset,
    pub pseudo_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub source_domain_id: usize,
}

impl PseudoLabeledDataset {
    /// The samples' own labels are hidden so no training path can read them.
    pub fn new(samples: Dataset, pseudo_labels: Vec<usize>, confidences: Vec<f64>) -> Result<Self> {
        let samples = samples.hide_labels();
        if pseudo_labels.len() != samples.len() || confidences.len() != samples.len() {
            return Err(invalid("pseudo-labels, confidences and samples must align"));
        }
        if let Some(&l) = pseudo_labels.iter().find(|&&l| l >= samples.k()) {
            return Err(invalid(format!("pseudo-label {l} out of range")));
        }
        Ok(Self {
            source_domain_id: samples.domain_id(),
            samples,
            pseudo_labels,
            confidences,
        })
    }

    pub fn len(&self) -> usize {
        self.pseudo_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo_labels.is_empty()
    }

    /// Replaces `fraction` of the labels (chosen at random) with a different,
    /// uniformly drawn class. Returns the flipped indices.
    pub fn flip_labels(&mut self, fraction: f64, rng: &mut Rng) -> Result<Vec<usize>> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(invalid("flip fraction must lie in [0, 1]"));
        }
        let k = self.samples.k();
        if k < 2 {
            return Ok(Vec::new());
        }
        let n_flip = (fraction * self.len() as f64).round() as usize;
        let mut chosen = (0..self.len()).choose_multiple(rng, n_flip);
        chosen.sort_unstable();
        for &i in &chosen {
            let old = self.pseudo_labels[i];
            let mut new = rng.random_range(0..k - 1);
            if new >= old {
                new += 1;
            }
            self.pseudo_labels[i] = new;
        }
        Ok(chosen)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DGConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Distillation weight.
    pub alpha: f64,
    pub selnlpl: bool,
    /// Share of epochs spent on negative learning over all pseudo-labels.
    pub nl_epoch_fraction: f64,
    /// Share of epochs spent on selective negative learning.
    pub selnl_epoch_fraction: f64,
    /// Confidence a sample needs to enter selective positive learning.
    pub pl_conf_threshold: f64,
    /// Confidence floor of selective negative learning; `None` means `1/K`.
    pub nl_conf_floor: Option<f64>,
    pub clip_eps: f64,
}

impl Default for DGConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 64,
            alpha: 1.0,
            selnlpl: true,
            nl_epoch_fraction: 0.25,
            selnl_epoch_fraction: 0.25,
            pl_conf_threshold: 0.5,
            nl_conf_floor: None,
            clip_eps: 1e-7,
        }
    }
}

impl DGConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(invalid("dg.lr must be > 0 and dg.batch_size >= 1"));
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid("dg.alpha must be >= 0"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let floor_ok = self.nl_conf_floor.is_none_or(unit);
        if !unit(self.pl_conf_threshold) || !floor_ok {
            return Err(invalid("dg confidence thresholds must lie in [0, 1]"));
        }
        if !unit(self.nl_epoch_fraction)
            || !unit(self.selnl_epoch_fraction)
            || self.nl_epoch_fraction + self.selnl_epoch_fraction > 1.0
        {
            return Err(invalid(
                "dg epoch fractions must lie in [0, 1] and sum to at most 1",
            ));
        }
        Ok(())
    }

    pub fn conf_floor(&self, k: usize) -> f64 {
        self.nl_conf_floor.unwrap_or(1.0 / k as f64)
    }

    /// Phase of `epoch` under this schedule.
    pub fn phase(&self, epoch: usize) -> Phase {
        if !self.selnlpl {
            return Phase::Erm;
        }
        let n_nl = (self.epochs as f64 * self.nl_epoch_fraction).round() as usize;
        let n_selnl = (self.epochs as f64 * self.selnl_epoch_fraction).round() as usize;
        if epoch < n_nl {
            Phase::Nl
        } else if epoch < n_nl + n_selnl {
            Phase::SelNl
        } else {
            Phase::SelPl
        }
    }
}

fn check_probs(probs: &[f64], label: usize) -> Result<()> {
    if label >= probs.len() {
        return Err(invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(())
}

/// `-ln(max(p_label, clip_eps))`.
pub fn ce_loss(probs: &[f64], label: usize, clip_eps: f64) -> Result<f64> {
    check_probs(probs, label)?;
    Ok(-probs[label].max(clip_eps).ln())
}

/// `-ln(max(1 - p_complementary, clip_eps))`.
pub fn nl_loss(probs: &[f64], complementary: usize, given: usize, clip_eps: f64) -> Result<f64> {
    check_probs(probs, complementary)?;
    if complementary == given {
        return Err(invalid(
            "complementary label must differ from the given label",
        ));
    }
    Ok(-(1.0 - probs[complementary]).max(clip_eps).ln())
}

/// Uniform draw from every class except `label`.
pub fn complementary_label(label: usize, k: usize, rng: &mut Rng) -> usize {
    let c = rng.random_range(0..k - 1);
    if c >= label {
        c + 1
    } else {
        c
    }
}

/// Indices whose softmax probability of their own (pseudo-)label under
/// `params` strictly exceeds `threshold`.
pub fn select_confident(
    dataset: &PseudoLabeledDataset,
    params: &ClassifierParams,
    threshold: f64,
) -> Result<Vec<usize>> {
    confident_rows(
        params,
        dataset.samples.features(),
        &dataset.pseudo_labels,
        threshold,
    )
}

fn confident_rows(
    params: &ClassifierParams,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    threshold: f64,
) -> Result<Vec<usize>> {
    let probs = nnmodel::softmax_rows(nnmodel::forward(params, x)?.view());
    Ok(probs
        .rows()
        .into_iter()
        .zip(labels)
        .enumerate()
        .filter(|(_, (p, &label))| p[label] > threshold)
        .map(|(i, _)| i)
        .collect())
}

/// Mean `KL(q || p)` where `q` and `p` are the predictions of the previous
/// and current DG models on the same augmented inputs.
pub fn distill_loss(
    prev: &ClassifierParams,
    cur: &ClassifierParams,
    x_augmented: ArrayView2<'_, f64>,
) -> Result<f64> {
    if !prev.shape_compatible(cur) {
        return Err(invalid("previous and current parameters differ in shape"));
    }
    let teacher = nnmodel::softmax_rows(nnmodel::forward(prev, x_augmented)?.view());
    let logits = nnmodel::forward(cur, x_augmented)?;
    Ok(Distillation { teacher }.loss_and_grad(logits.view())?.0)
}

/// Randomness consumed by DG training, one stream per purpose.
pub struct TrainRngs<'a> {
    pub aug: &'a mut Rng,
    pub shuffle: &'a mut Rng,
    pub nl: &'a mut Rng,
}

/// The merged training pool `pseudo-labeled target ∪ replay buffer`.
struct Pool {
    x: Array2<f64>,
    labels: Vec<usize>,
    kinds: Vec<LabelKind>,
}

impl Pool {
    fn from_source(source: &Dataset) -> Result<Self> {
        Ok(Self {
            x: source.features().to_owned(),
            labels: source.labels()?,
            kinds: vec![LabelKind::True; source.len()],
        })
    }

    fn from_target(pl: &PseudoLabeledDataset, buffer: &ReplayBuffer) -> Result<Self> {
        let entries = buffer.entries();
        let d = pl.samples.d();
        let n = pl.len() + entries.len();
        let mut x = Array2::zeros((n, d));
        x.slice_mut(ndarray::s![..pl.len(), ..])
            .assign(&pl.samples.features());
        let mut labels = pl.pseudo_labels.clone();
        let mut kinds = vec![LabelKind::Pseudo; pl.len()];
        for (row, e) in entries.iter().enumerate() {
            if e.features.len() != d {
                return Err(invalid("buffer entry dimension mismatch"));
            }
            x.row_mut(pl.len() + row)
                .assign(&ndarray::ArrayView1::from(&e.features[..]));
            labels.push(e.label);
            kinds.push(e.label_kind);
        }
        Ok(Self { x, labels, kinds })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }
}

type EpochHook<'h> = &'h mut dyn FnMut(&EpochReport, &ClassifierParams) -> Result<()>;

pub fn train_dg_source(
    init: &ClassifierParams,
    source_train: &Dataset,
    config: &DGConfig,
    aug: &AugmentConfig,
    rngs: TrainRngs<'_>,
) -> Result<ClassifierParams> {
    train_dg_source_with(init, source_train, config, aug, rngs, &mut |_, _| Ok(()))
}

/// Cross-entropy on augmented source batches. SelNLPL and distillation are
/// never used here: source labels are clean and there is no previous model.
pub fn train_dg_source_with(
    init: &ClassifierParams,
    source_train: &Dataset,
    config: &DGConfig,
    aug: &AugmentConfig,
    rngs: TrainRngs<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<ClassifierParams> {
    config.validate()?;
    if source_train.is_empty() {
        return Err(invalid("source training set is empty"));
    }
    let pool = Pool::from_source(source_train)?;
    let source_cfg = DGConfig {
        selnlpl: false,
        alpha: 0.0,
        ..config.clone()
    };
    run_epochs(
        init,
        None,
        &pool,
        &source_cfg,
        aug,
        rngs,
        Phase::Source,
        on_epoch,
    )
}

pub fn train_dg_target(
    prev_dg: &ClassifierParams,
    pl_data: &PseudoLabeledDataset,
    buffer: &ReplayBuffer,
    config: &DGConfig,
    aug: &AugmentConfig,
    rngs: TrainRngs<'_>,
) -> Result<ClassifierParams> {
    train_dg_target_with(prev_dg, pl_data, buffer, config, aug, rngs, &mut |_, _| {
        Ok(())
    })
}

/// ERM on `pl_data ∪ buffer` plus `alpha` times distillation from `prev_dg`.
pub fn train_dg_target_with(
    prev_dg: &ClassifierParams,
    pl_data: &PseudoLabeledDataset,
    buffer: &ReplayBuffer,
    config: &DGConfig,
    aug: &AugmentConfig,
    rngs: TrainRngs<'_>,
    on_epoch: EpochHook<'_>,
) -> Result<ClassifierParams> {
    config.validate()?;
    let pool = Pool::from_target(pl_data, buffer)?;
    if pool.len() == 0 {
        return Err(invalid("pseudo-labeled data and buffer are both empty"));
    }
    run_epochs(
        prev_dg,
        Some(prev_dg),
        &pool,
        config,
        aug,
        rngs,
        Phase::Erm,
        on_epoch,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    init: &ClassifierParams,
    teacher: Option<&ClassifierParams>,
    pool: &Pool,
    config: &DGConfig,
    aug: &AugmentConfig,
    rngs: TrainRngs<'_>,
    plain_phase: Phase,
    on_epoch: EpochHook<'_>,
) -> Result<ClassifierParams> {
    let k = init.config().k;
    let mut params = init.clone();
    let mut opt = Sgd::new(config.lr, config.momentum);
    let all: Vec<usize> = (0..pool.len()).collect();
    for epoch in 0..config.epochs {
        let phase = match config.phase(epoch) {
            Phase::Erm => plain_phase,
            p => p,
        };
        let selected = match phase {
            Phase::SelNl => {
                confident_rows(&params, pool.x.view(), &pool.labels, config.conf_floor(k))?
            }
            Phase::SelPl => confident_rows(
                &params,
                pool.x.view(),
                &pool.labels,
                config.pl_conf_threshold,
            )?,
            _ => all.clone(),
        };
        let mut is_selected = vec![false; pool.len()];
        for i in selected {
            is_selected[i] = true;
        }

        let mut total = 0.0;
        let mut batches = 0;
        for batch in shuffled_batches(pool.len(), config.batch_size, rngs.shuffle) {
            let terms: Vec<SampleTerm> = batch
                .iter()
                .map(|&i| {
                    let label = pool.labels[i];
                    if pool.kinds[i] == LabelKind::True {
                        return SampleTerm::Positive(label);
                    }
                    match phase {
                        Phase::Nl => SampleTerm::Negative(complementary_label(label, k, rngs.nl)),
                        Phase::SelNl if is_selected[i] => {
                            SampleTerm::Negative(complementary_label(label, k, rngs.nl))
                        }
                        Phase::SelPl if is_selected[i] => SampleTerm::Positive(label),
                        Phase::SelNl | Phase::SelPl => SampleTerm::Skip,
                        _ => SampleTerm::Positive(label),
                    }
                })
                .collect();
            let xb = randmix(pool.x.select(Axis(0), &batch).view(), aug, rngs.aug)?;
            let erm = Erm::new(terms, config.clip_eps);
            let distill = match teacher {
                Some(prev) if config.alpha > 0.0 => Some(Distillation {
                    teacher: nnmodel::softmax_rows(nnmodel::forward(prev, xb.view())?.view()),
                }),
                _ => None,
            };
            let mut parts: Vec<(f64, &dyn Objective)> = vec![(1.0, &erm)];
            if let Some(d) = &distill {
                parts.push((config.alpha, d));
            }
            let (loss, grads) = nnmodel::gradient(&Weighted(parts), &params, xb.view(), false)?;
            opt.step(&mut params, &grads, false);
            total += loss;
            batches += 1;
        }
        let report = EpochReport {
            epoch,
            phase,
            mean_loss: total / batches as f64,
        };
        on_epoch(&report, &params)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;
    use crate::nnmodel::{init_params, ModelConfig};
    use crate::rng::from_seed;

    #[test]
    fn ce_examples() {
        assert_eq!(ce_loss(&[0.0, 1.0], 1, 1e-7).unwrap(), 0.0);
        assert!((ce_loss(&[0.25; 4], 2, 1e-7).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&[0.7, 0.3], 0, 1e-7).unwrap() - 0.35667).abs() < 1e-5);
        assert!(ce_loss(&[0.7, 0.3], 2, 1e-7).is_err());
    }

    #[test]
    fn nl_examples() {
        assert_eq!(nl_loss(&[1.0, 0.0], 1, 0, 1e-7).unwrap(), 0.0);
        assert!((nl_loss(&[0.8, 0.2], 1, 0, 1e-7).unwrap() - 0.22314).abs() < 1e-5);
        assert!((nl_loss(&[0.0, 1.0], 1, 0, 1e-7).unwrap() + 1e-7f64.ln()).abs() < 1e-9);
        assert!(nl_loss(&[0.5, 0.5], 1, 1, 1e-7).is_err());
    }

    #[test]
    fn kl_example() {
        let q: [f64; 2] = [0.5, 0.5];
        let p: [f64; 2] = [0.9, 0.1];
        let kl: f64 = q.iter().zip(&p).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((kl - 0.51083).abs() < 1e-5);
        let logits = ndarray::array![[0.9f64.ln(), 0.1f64.ln()]];
        let teacher = ndarray::array![[0.5, 0.5]];
        let (l, _) = Distillation { teacher }
            .loss_and_grad(logits.view())
            .unwrap();
        assert!((l - 0.51083).abs() < 1e-5);
    }

    #[test]
    fn complementary_never_equals_label() {
        let mut rng = from_seed(2);
        for _ in 0..200 {
            let label = rng.random_range(0..5);
            assert_ne!(complementary_label(label, 5, &mut rng), label);
        }
    }

    fn uniform_model(k: usize) -> ClassifierParams {
        ClassifierParams::zeros(&ModelConfig {
            d: 2,
            hidden: vec![],
            feat_dim: 2,
            k,
        })
    }

    fn tiny_pl(n: usize, k: usize) -> PseudoLabeledDataset {
        let samples = (0..n)
            .map(|i| Sample {
                features: vec![i as f64 / n as f64, 1.0 - i as f64 / n as f64],
                label: None,
                domain_id: 1,
            })
            .collect();
        let ds = Dataset::new(samples, k, 2).unwrap();
        PseudoLabeledDataset::new(ds, (0..n).map(|i| i % k).collect(), vec![0.5; n]).unwrap()
    }

    #[test]
    fn selection_boundaries() {
        let pl = tiny_pl(10, 4);
        let p = uniform_model(4);
        assert!(select_confident(&pl, &p, 0.25).unwrap().is_empty());
        assert_eq!(select_confident(&pl, &p, 0.0).unwrap().len(), 10);
    }

    #[test]
    fn distill_identical_models_is_zero() {
        let cfg = ModelConfig {
            d: 2,
            hidden: vec![3],
            feat_dim: 2,
            k: 3,
        };
        let p = init_params(&cfg, &mut from_seed(1)).unwrap();
        let x = ndarray::array![[0.5, -1.0], [2.0, 0.1]];
        assert!(distill_loss(&p, &p, x.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn phase_schedule() {
        let cfg = DGConfig {
            epochs: 8,
            ..DGConfig::default()
        };
        let phases: Vec<Phase> = (0..8).map(|e| cfg.phase(e)).collect();
        assert_eq!(
            phases,
            [
                Phase::Nl,
                Phase::Nl,
                Phase::SelNl,
                Phase::SelNl,
                Phase::SelPl,
                Phase::SelPl,
                Phase::SelPl,
                Phase::SelPl
            ]
        );
        let off = DGConfig {
            selnlpl: false,
            ..cfg
        };
        assert_eq!(off.phase(0), Phase::Erm);
    }

    #[test]
    fn flip_changes_exactly_the_chosen_labels() {
        let mut pl = tiny_pl(50, 5);
        let before = pl.pseudo_labels.clone();
        let flipped = pl.flip_labels(0.2, &mut from_seed(4)).unwrap();
        assert_eq!(flipped.len(), 10);
        for (i, (b, a)) in before.iter().zip(&pl.pseudo_labels).enumerate() {
            assert_eq!(flipped.contains(&i), b != a);
        }
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let cfg = ModelConfig {
            d: 2,
            hidden: vec![3],
            feat_dim: 2,
            k: 4,
        };
        let p = init_params(&cfg, &mut from_seed(1)).unwrap();
        let dg = DGConfig {
            epochs: 0,
            ..DGConfig::default()
        };
        let pl = tiny_pl(12, 4);
        let buffer = ReplayBuffer::new(10, 4);
        let (mut a, mut s, mut n) = (from_seed(1), from_seed(2), from_seed(3));
        let rngs = TrainRngs {
            aug: &mut a,
            shuffle: &mut s,
            nl: &mut n,
        };
        let out = train_dg_target(&p, &pl, &buffer, &dg, &AugmentConfig::default(), rngs).unwrap();
        assert_eq!(out, p);
    }

    #[test]
    fn hidden_labels_cannot_train_source() {
        let pl = tiny_pl(12, 4);
        let cfg = ModelConfig {
            d: 2,
            hidden: vec![3],
            feat_dim: 2,
            k: 4,
        };
        let p = init_params(&cfg, &mut from_seed(1)).unwrap();
        let (mut a, mut s, mut n) = (from_seed(1), from_seed(2), from_seed(3));
        let rngs = TrainRngs {
            aug: &mut a,
            shuffle: &mut s,
            nl: &mut n,
        };
        let err = train_dg_source(
            &p,
            &pl.samples,
            &DGConfig::default(),
            &AugmentConfig::default(),
            rngs,
        );
        assert!(matches!(err, Err(crate::CodagError::HiddenLabel { .. })));
    }
}
