//! Library outputs against small independent reimplementations.

#![allow(clippy::needless_range_loop)]

use codag_core::adapt::{centroid_pseudo_labels, generate_pseudo_labels};
use codag_core::data::{Dataset, Sample};
use codag_core::evaluate::accuracy;
use codag_core::generalize::select_confident;
use codag_core::nnmodel::{self, init_params, ClassifierParams, ModelConfig};
use codag_core::rng::{from_seed, Rng};
use rand::Rng as _;

fn model(seed: u64, d: usize, k: usize) -> ClassifierParams {
    let cfg = ModelConfig {
        d,
        hidden: vec![8],
        feat_dim: 6,
        k,
    };
    init_params(&cfg, &mut from_seed(seed)).unwrap()
}

fn dataset(rng: &mut Rng, n: usize, d: usize, k: usize, labeled: bool) -> Dataset {
    let samples = (0..n)
        .map(|_| Sample {
            features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: labeled.then(|| rng.random_range(0..k)),
            domain_id: 1,
        })
        .collect();
    Dataset::new(samples, k, d).unwrap()
}

fn probs_of(p: &ClassifierParams, x: &[f64]) -> Vec<f64> {
    nnmodel::softmax(&nnmodel::forward_one(p, x).unwrap()).unwrap()
}

fn first_max(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

fn nearest(f: &[f64], centroids: &[Vec<f64>]) -> usize {
    let d: Vec<f64> = centroids.iter().map(|c| cos_dist(f, c)).collect();
    let mut best = 0;
    for i in 1..d.len() {
        if d[i] < d[best] {
            best = i;
        }
    }
    best
}

#[test]
fn centroid_labels_match_loop_oracle() {
    for seed in 0..5 {
        let mut rng = from_seed(100 + seed);
        let (d, k) = (3, 4);
        let p = model(seed, d, k);
        let ds = dataset(&mut rng, 20, d, k, false).hide_labels();
        let feats: Vec<Vec<f64>> = nnmodel::features(&p, ds.features())
            .unwrap()
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect();
        let probs: Vec<Vec<f64>> = (0..ds.len())
            .map(|i| probs_of(&p, &ds.sample(i).features))
            .collect();
        let f = feats[0].len();

        let mut centroids = vec![vec![0.0; f]; k];
        for c in 0..k {
            let mass: f64 = probs.iter().map(|pr| pr[c]).sum();
            for j in 0..f {
                let s: f64 = feats.iter().zip(&probs).map(|(x, pr)| pr[c] * x[j]).sum();
                centroids[c][j] = if mass > 0.0 { s / mass } else { s };
            }
        }
        let first: Vec<usize> = feats.iter().map(|x| nearest(x, &centroids)).collect();
        for c in 0..k {
            let members: Vec<&Vec<f64>> = feats
                .iter()
                .zip(&first)
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x)
                .collect();
            if !members.is_empty() {
                for j in 0..f {
                    centroids[c][j] =
                        members.iter().map(|x| x[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
        let expected: Vec<usize> = feats.iter().map(|x| nearest(x, &centroids)).collect();
        assert_eq!(
            centroid_pseudo_labels(&p, &ds).unwrap(),
            expected,
            "seed {seed}"
        );
    }
}

#[test]
fn pseudo_labels_match_argmax_oracle() {
    let mut rng = from_seed(7);
    let p = model(3, 4, 5);
    let ds = dataset(&mut rng, 50, 4, 5, true);
    let pl = generate_pseudo_labels(&p, &ds.hide_labels()).unwrap();
    for i in 0..50 {
        let pr = probs_of(&p, &ds.sample(i).features);
        let l = first_max(&pr);
        assert_eq!(pl.pseudo_labels[i], l);
        assert!((pl.confidences[i] - pr[l]).abs() < 1e-12);
    }
    assert!(pl.samples.labels_hidden());
}

#[test]
fn selection_matches_brute_force_filter() {
    let mut rng = from_seed(8);
    let p = model(4, 3, 3);
    let ds = dataset(&mut rng, 30, 3, 3, false);
    let labels: Vec<usize> = (0..30).map(|i| (i * 5) % 3).collect();
    let pl = codag_core::generalize::PseudoLabeledDataset::new(
        ds.clone(),
        labels.clone(),
        vec![1.0; 30],
    )
    .unwrap();
    for threshold in [0.0, 1.0 / 3.0, 0.34, 0.4, 0.5, 0.9, 1.0] {
        let expected: Vec<usize> = (0..30)
            .filter(|&i| probs_of(&p, &ds.sample(i).features)[labels[i]] > threshold)
            .collect();
        assert_eq!(
            select_confident(&pl, &p, threshold).unwrap(),
            expected,
            "threshold {threshold}"
        );
    }
}

#[test]
fn accuracy_matches_counting_oracle() {
    let mut rng = from_seed(9);
    let p = model(5, 4, 3);
    let ds = dataset(&mut rng, 100, 4, 3, true);
    let mut hits = 0;
    for i in 0..100 {
        let s = ds.sample(i);
        if first_max(&probs_of(&p, &s.features)) == s.label.unwrap() {
            hits += 1;
        }
    }
    assert_eq!(accuracy(&p, &ds).unwrap(), hits as f64 / 100.0);
}
