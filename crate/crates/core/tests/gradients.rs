//! Central finite differences against the analytic backward pass, for
//! every training loss, on random small models.

use codag_core::nnmodel::{self, init_params, BlockKind, ClassifierParams, ModelConfig, Sgd};
use codag_core::objective::{Distillation, Erm, InfoMax, Objective, SampleTerm, Weighted};
use codag_core::rng::from_seed;
use ndarray::Array2;
use rand::Rng as _;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_model(seed: u64, hidden: Vec<usize>) -> ClassifierParams {
    let cfg = ModelConfig {
        d: 5,
        hidden,
        feat_dim: 4,
        k: 4,
    };
    let mut p = init_params(&cfg, &mut from_seed(seed)).unwrap();
    let mut rng = from_seed(seed ^ 0xabcd);
    for (_, block) in p.blocks_mut() {
        for v in block.iter_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    p
}

fn batch(seed: u64, n: usize) -> Array2<f64> {
    let mut rng = from_seed(seed);
    Array2::from_shape_simple_fn((n, 5), || rng.random_range(-2.0..2.0))
}

fn check(objective: &dyn Objective, p: &ClassifierParams, x: &Array2<f64>, name: &str) {
    let (loss, grads) = nnmodel::gradient(objective, p, x.view(), false).unwrap();
    let eval = |q: &ClassifierParams| {
        objective
            .loss_and_grad(nnmodel::forward(q, x.view()).unwrap().view())
            .unwrap()
            .0
    };
    assert!(
        (loss - eval(p)).abs() < 1e-12,
        "{name}: reported loss differs from forward loss"
    );
    let names = p.block_names();
    for (b, (_, _, analytic)) in grads.blocks().into_iter().enumerate() {
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut plus = p.clone();
                plus.blocks_mut()[b].1[i] += H;
                let mut minus = p.clone();
                minus.blocks_mut()[b].1[i] -= H;
                (eval(&plus) - eval(&minus)) / (2.0 * H)
            })
            .collect();
        let diff = numeric
            .iter()
            .zip(analytic)
            .map(|(n, a)| (n - a).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = numeric
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if norm < 1e-10 { diff } else { diff / norm };
        assert!(
            rel < TOL,
            "{name}: block {} relative error {rel:e}",
            names[b]
        );
    }
}

fn models() -> Vec<ClassifierParams> {
    vec![
        random_model(1, vec![6]),
        random_model(2, vec![7, 3]),
        random_model(3, vec![]),
    ]
}

#[test]
fn cross_entropy() {
    for (s, p) in models().iter().enumerate() {
        let x = batch(10 + s as u64, 9);
        let labels: Vec<usize> = (0..9).map(|i| (i * 3 + s) % 4).collect();
        check(&Erm::cross_entropy(&labels, 1e-7), p, &x, "ce");
    }
}

#[test]
fn information_maximization_with_pseudo_labels() {
    for (s, p) in models().iter().enumerate() {
        let x = batch(20 + s as u64, 8);
        let labels: Vec<usize> = (0..8).map(|i| (i + s) % 4).collect();
        let ce = Erm::cross_entropy(&labels, 1e-7);
        check(&InfoMax, p, &x, "im");
        check(
            &Weighted(vec![(1.0, &InfoMax as &dyn Objective), (0.3, &ce)]),
            p,
            &x,
            "im+pseudo-ce",
        );
    }
}

#[test]
fn distillation_kl() {
    for (s, p) in models().iter().enumerate() {
        let x = batch(30 + s as u64, 6);
        let prev = random_model(40 + s as u64, p.config().hidden.clone());
        let teacher = nnmodel::softmax_rows(nnmodel::forward(&prev, x.view()).unwrap().view());
        let kl = Distillation { teacher };
        check(&kl, p, &x, "kl");
        let ce = Erm::cross_entropy(&[0, 1, 2, 3, 0, 1], 1e-7);
        check(
            &Weighted(vec![(1.0, &ce as &dyn Objective), (0.7, &kl)]),
            p,
            &x,
            "ce+kl",
        );
    }
}

#[test]
fn negative_learning_and_mixed_terms() {
    for (s, p) in models().iter().enumerate() {
        let x = batch(50 + s as u64, 8);
        let nl = Erm::new(
            (0..8).map(|i| SampleTerm::Negative((i + s) % 4)).collect(),
            1e-7,
        );
        check(&nl, p, &x, "nl");
        let terms = (0..8)
            .map(|i| match i % 3 {
                0 => SampleTerm::Positive(i % 4),
                1 => SampleTerm::Negative((i + 1) % 4),
                _ => SampleTerm::Skip,
            })
            .collect();
        check(&Erm::new(terms, 1e-7), p, &x, "mixed");
    }
}

#[test]
fn frozen_head_steps_leave_head_bits_unchanged() {
    let p0 = random_model(60, vec![6]);
    let mut p = p0.clone();
    let x = batch(61, 10);
    let mut opt = Sgd::new(0.05, 0.9);
    for _ in 0..5 {
        let (_, g) = nnmodel::gradient(&InfoMax, &p, x.view(), true).unwrap();
        for (kind, _, v) in g.blocks() {
            if kind == BlockKind::Head {
                assert!(v.iter().all(|&x| x == 0.0));
            }
        }
        opt.step(&mut p, &g, true);
    }
    for ((kind, _, a), (_, _, b)) in p.blocks().into_iter().zip(p0.blocks()) {
        if kind == BlockKind::Head {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
    assert_ne!(p.extractor, p0.extractor);
}
