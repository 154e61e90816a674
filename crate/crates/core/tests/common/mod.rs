#![allow(dead_code)]

use fal_core::data::{Dataset, Example};
use fal_core::federation::{ClientPool, LabelState};
use fal_core::model::{init_params, Architecture, ModelParams};
use fal_core::rng::{rng_from, Rng};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> Rng {
    rng_from(seed ^ 0x5eed_0000_0000)
}

pub fn gaussian(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

/// Random dataset with standard-normal features and uniform labels.
pub fn random_dataset(rng: &mut Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let examples = (0..n)
        .map(|id| Example {
            id,
            features: gaussian(rng, dim, 1.0),
            label: rng.random_range(0..classes),
        })
        .collect();
    Dataset::new("random", classes, examples).unwrap()
}

/// Dataset whose features are given verbatim.
pub fn dataset_from(features: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize) -> Dataset {
    let examples = features
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (features, label))| Example { id, features, label })
        .collect();
    Dataset::new("hand", classes, examples).unwrap()
}

/// Randomly initialised model with every bias also randomised so ReLU
/// patterns and logits are generic.
pub fn random_model(arch: &Architecture, seed: u64, scale: f64) -> ModelParams {
    let mut params = init_params(arch, seed).unwrap();
    let mut r = rng(seed.wrapping_add(17));
    for layer in &mut params.layers {
        for w in &mut layer.weights {
            *w *= scale;
        }
        for b in &mut layer.bias {
            *b = 0.3 * Distribution::<f64>::sample(&StandardNormal, &mut r);
        }
    }
    params
}

/// A model without hidden layers whose logits equal the input features
/// (identity classifier, zero bias): `z = x`, `p = softmax(x)`.
pub fn identity_model(classes: usize) -> ModelParams {
    let arch = Architecture::new(classes, vec![], classes).unwrap();
    let mut params = ModelParams::zeros(&arch);
    let layer = &mut params.layers[0];
    for c in 0..classes {
        layer.weights[c * classes + c] = 1.0;
    }
    params
}

/// Feature vector (log-probabilities) that the identity model maps to `probs`.
pub fn logits_for(probs: &[f64]) -> Vec<f64> {
    probs.iter().map(|p| p.max(1e-300).ln()).collect()
}

pub fn state(labeled: Vec<Vec<usize>>, unlabeled: Vec<Vec<usize>>) -> LabelState {
    LabelState {
        clients: labeled
            .into_iter()
            .zip(unlabeled)
            .map(|(labeled, mut unlabeled)| {
                unlabeled.sort_unstable();
                ClientPool { labeled, unlabeled }
            })
            .collect(),
    }
}

pub fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Sum of within-cluster squared error of the best partition of `points`
/// into exactly `b` non-empty groups, by enumerating every labeling.
pub fn brute_force_kmeans(points: &[Vec<f64>], b: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut counts = vec![0usize; b];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.iter().all(|&c| c > 0) {
            let mut sums = vec![vec![0.0; dim]; b];
            for (p, &l) in points.iter().zip(&labels) {
                for (s, v) in sums[l].iter_mut().zip(p) {
                    *s += v;
                }
            }
            let j: f64 = points
                .iter()
                .zip(&labels)
                .map(|(p, &l)| {
                    p.iter()
                        .zip(&sums[l])
                        .map(|(v, s)| (v - s / counts[l] as f64).powi(2))
                        .sum::<f64>()
                })
                .sum();
            best = best.min(j);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < b {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}
