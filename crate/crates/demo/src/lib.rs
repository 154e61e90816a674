//! Browser bindings. Each exported function returns a JSON string so the page
//! needs no generated TypeScript glue beyond `wasm-bindgen`'s own.

use fal_core::data::{generate_synthetic, partition_dirichlet, Concentration, PartitionConfig};
use fal_core::federation::{fedavg, make_initial_labels, train_local_only, FedConfig};
use fal_core::metrics::{self, critical_value, AccuracySeries};
use fal_core::model::{init_params, Architecture, TrainConfig};
use fal_core::rng::{derive_seed, Stream};
use fal_core::strategies::{entropy_query, logo_macro, logo_micro, MicroRule, QueryContext, Selector};
use fal_core::FalError;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Non-positive or non-finite values mean α = ∞.
fn concentration(alpha: f64) -> Concentration {
    if alpha.is_finite() && alpha > 0.0 {
        Concentration::Finite(alpha)
    } else {
        Concentration::Infinite
    }
}

#[derive(Debug, Serialize)]
pub struct PartitionView {
    /// clients × classes
    pub counts: Vec<Vec<usize>>,
    /// Total-variation distance of each client's class mix from uniform.
    pub client_tv: Vec<f64>,
    pub mean_tv: f64,
}

pub fn partition_view(
    num_classes: usize,
    per_class: usize,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<PartitionView, FalError> {
    let ds = generate_synthetic(num_classes, per_class, 2, 2.0, seed)?;
    let split = partition_dirichlet(
        &ds,
        &PartitionConfig {
            num_clients,
            alpha: concentration(alpha),
            rho: 1.0,
            seed,
        },
    )?;
    let counts = split.class_matrix(&ds);
    let uniform = vec![1.0 / num_classes as f64; num_classes];
    let client_tv: Vec<f64> = counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            let p: Vec<f64> = row.iter().map(|&c| c as f64 / n.max(1) as f64).collect();
            metrics::emd(&p, &uniform)
        })
        .collect::<Result<_, _>>()?;
    let mean_tv = client_tv.iter().sum::<f64>() / client_tv.len() as f64;
    Ok(PartitionView {
        counts,
        client_tv,
        mean_tv,
    })
}

#[derive(Debug, Serialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    /// Macro cluster for unlabeled points, `None` for labeled ones.
    pub cluster: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct SelectionView {
    pub points: Vec<Point>,
    pub logo: Vec<usize>,
    pub entropy: Vec<usize>,
    pub logo_cost: f64,
    pub entropy_cost: f64,
    pub logo_classes: Vec<usize>,
    pub entropy_classes: Vec<usize>,
}

/// One client of a four-client federation on 2-D data: LoGo versus global
/// entropy for a budget of `budget` points. Indices refer to `points`.
pub fn selection_view(alpha: f64, budget: usize, seed: u64) -> Result<SelectionView, FalError> {
    let classes = 4;
    let ds = generate_synthetic(classes, 60, 2, 2.0, seed)?;
    let split = partition_dirichlet(
        &ds,
        &PartitionConfig {
            num_clients: 4,
            alpha: concentration(alpha),
            rho: 1.0,
            seed,
        },
    )?;
    let state = make_initial_labels(&split, 6, derive_seed(seed, Stream::InitialLabels, 0, 0))?;
    let arch = Architecture::new(2, vec![16], classes)?;
    let train = TrainConfig {
        learning_rate: 0.05,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let fed = FedConfig {
        fl_rounds: 15,
        local_epochs: 2,
        train: train.clone(),
        ..FedConfig::default()
    };
    let init = init_params(&arch, derive_seed(seed, Stream::ModelInit, 0, 0))?;
    let global = fedavg(&init, &ds, &state, &fed, derive_seed(seed, Stream::FedClient, 1, 0))?.params;
    let local_cfg = TrainConfig {
        epochs: 50,
        early_stop_train_acc: Some(0.99),
        ..train
    };
    let local = train_local_only(&ds, &state, 0, &arch, &local_cfg, derive_seed(seed, Stream::LocalOnly, 1, 0))?.params;

    let pool = &state.clients[0];
    let ctx = QueryContext {
        client: 0,
        dataset: &ds,
        unlabeled: &pool.unlabeled,
        labeled: &pool.labeled,
        global: &global,
        local: Some(&local),
        budget: budget.min(pool.unlabeled.len()),
        seed: derive_seed(seed, Stream::Query, 2, 0),
    };
    let step = logo_macro(&ctx)?;
    let logo = logo_micro(&step.clustering, &ctx, MicroRule::Entropy)?;
    let entropy = entropy_query(&ctx, Selector::Global)?;

    // local positions: labeled points first, then the unlabeled pool
    let mut points: Vec<Point> = pool
        .labeled
        .iter()
        .map(|&i| Point {
            x: ds.features(i)[0],
            y: ds.features(i)[1],
            label: ds.label(i),
            cluster: None,
        })
        .collect();
    let offset = points.len();
    points.extend(pool.unlabeled.iter().enumerate().map(|(p, &i)| Point {
        x: ds.features(i)[0],
        y: ds.features(i)[1],
        label: ds.label(i),
        cluster: Some(step.clustering.assignments[p]),
    }));
    let position = |i: &usize| pool.unlabeled.binary_search(i).expect("picked from the pool");
    let cost = |picks: &[usize]| {
        let sel: Vec<Vec<f64>> = picks.iter().map(|i| step.embeddings[position(i)].clone()).collect();
        metrics::transport_cost(&step.clustering.centroids, &sel)
    };
    let classes_of = |picks: &[usize]| {
        let mut h = vec![0; classes];
        picks.iter().for_each(|&i| h[ds.label(i)] += 1);
        h
    };
    Ok(SelectionView {
        logo_cost: cost(&logo)?,
        entropy_cost: cost(&entropy)?,
        logo_classes: classes_of(&logo),
        entropy_classes: classes_of(&entropy),
        logo: logo.iter().map(|i| offset + position(i)).collect(),
        entropy: entropy.iter().map(|i| offset + position(i)).collect(),
        points,
    })
}

#[derive(Debug, Serialize)]
pub struct ComparisonView {
    pub t_scores: Vec<f64>,
    pub threshold: f64,
    pub win_i: f64,
    pub win_j: f64,
}

/// Rounds separated by `;` or newlines, per-seed accuracies by `,`.
pub fn parse_series(text: &str) -> Result<Vec<Vec<f64>>, FalError> {
    text.split([';', '\n'])
        .map(str::trim)
        .filter(|r| !r.is_empty())
        .map(|r| {
            r.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| FalError::InvalidArgument(format!("not a number: {v:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn comparison_view(a: &str, b: &str) -> Result<ComparisonView, FalError> {
    let i = AccuracySeries {
        strategy: "i".into(),
        rounds: parse_series(a)?,
    };
    let j = AccuracySeries {
        strategy: "j".into(),
        rounds: parse_series(b)?,
    };
    let t_scores = metrics::round_t_scores(&i, &j)?;
    let threshold = critical_value(i.num_seeds());
    let reverse: Vec<f64> = t_scores.iter().map(|t| -t).collect();
    Ok(ComparisonView {
        win_i: metrics::winning_rate_from_t(&t_scores, threshold),
        win_j: metrics::winning_rate_from_t(&reverse, threshold),
        t_scores,
        threshold,
    })
}

fn to_js<T: Serialize>(r: Result<T, FalError>) -> Result<String, JsValue> {
    let v = r.map_err(|e| JsValue::from_str(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn partition_demo(num_classes: usize, per_class: usize, num_clients: usize, alpha: f64, seed: u32) -> Result<String, JsValue> {
    to_js(partition_view(num_classes, per_class, num_clients, alpha, seed as u64))
}

#[wasm_bindgen]
pub fn logo_demo(alpha: f64, budget: usize, seed: u32) -> Result<String, JsValue> {
    to_js(selection_view(alpha, budget, seed as u64))
}

#[wasm_bindgen]
pub fn compare_demo(a: &str, b: &str) -> Result<String, JsValue> {
    // JSON has no infinity; zero-spread t-scores travel as ±1e308
    to_js(comparison_view(a, b).map(|mut v| {
        v.t_scores.iter_mut().filter(|t| t.is_infinite()).for_each(|t| *t = t.signum() * 1e308);
        v
    }))
}
