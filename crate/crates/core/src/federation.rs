//! FedAvg orchestration, local-only training and per-client label pools.

use std::collections::HashSet;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, Dataset};
use crate::error::{invalid, Result};
use crate::model::{decay_factor, init_params, sgd_train, Architecture, ModelParams, TrainConfig, TrainOutcome};
use crate::rng::{derive_seed, rng_from, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Every AL round starts FedAvg from the same seeded initialisation.
    Random,
    /// Every AL round starts from the previous round's global model.
    Continue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FedConfig {
    pub fl_rounds: usize,
    pub local_epochs: usize,
    pub init_mode: InitMode,
    /// Optimiser settings for client updates. `epochs` is ignored in favour of
    /// `local_epochs`; `lr_decay` is applied across FL rounds.
    pub train: TrainConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            fl_rounds: 30,
            local_epochs: 5,
            init_mode: InitMode::Random,
            train: TrainConfig::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fl_rounds == 0 || self.local_epochs == 0 {
            return Err(invalid("fl_rounds and local_epochs must be >= 1"));
        }
        self.train.validate()
    }

    fn client_config(&self, fl_round: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate * decay_factor(self.train.lr_decay, fl_round, self.fl_rounds),
            epochs: self.local_epochs,
            lr_decay: None,
            early_stop_train_acc: None,
            seed,
            ..self.train.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClientPool {
    /// Labeled positions in query order.
    pub labeled: Vec<usize>,
    /// Unlabeled positions, kept sorted.
    pub unlabeled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelState {
    pub clients: Vec<ClientPool>,
}

impl LabelState {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn total_labeled(&self) -> usize {
        self.clients.iter().map(|c| c.labeled.len()).sum()
    }

    pub fn labeled_union(&self) -> Vec<usize> {
        self.clients.iter().flat_map(|c| c.labeled.iter().copied()).collect()
    }

    /// Moves `picks` from the client's unlabeled pool to its labeled set.
    pub fn reveal(&mut self, client: usize, picks: &[usize]) -> Result<()> {
        let pool = self
            .clients
            .get_mut(client)
            .ok_or_else(|| invalid(format!("no client {client}")))?;
        let mut seen = HashSet::with_capacity(picks.len());
        for &p in picks {
            if !seen.insert(p) {
                return Err(invalid(format!("index {p} queried twice")));
            }
            if pool.unlabeled.binary_search(&p).is_err() {
                return Err(invalid(format!("index {p} is not in client {client}'s unlabeled pool")));
            }
        }
        pool.unlabeled.retain(|i| !seen.contains(i));
        pool.labeled.extend_from_slice(picks);
        Ok(())
    }

    /// Disjointness of labeled/unlabeled sets and conservation of each
    /// client's original pool.
    pub fn check_invariants(&self, split: &ClientSplit) -> Result<()> {
        if self.clients.len() != split.clients.len() {
            return Err(invalid("label state and split disagree on client count"));
        }
        for (k, (pool, original)) in self.clients.iter().zip(&split.clients).enumerate() {
            let labeled: HashSet<usize> = pool.labeled.iter().copied().collect();
            if labeled.len() != pool.labeled.len() {
                return Err(invalid(format!("client {k}: duplicate labeled index")));
            }
            if pool.unlabeled.iter().any(|i| labeled.contains(i)) {
                return Err(invalid(format!("client {k}: labeled and unlabeled overlap")));
            }
            if !pool.unlabeled.windows(2).all(|w| w[0] < w[1]) {
                return Err(invalid(format!("client {k}: unlabeled pool not sorted")));
            }
            let mut union: Vec<usize> = pool.labeled.iter().chain(&pool.unlabeled).copied().collect();
            union.sort_unstable();
            if union != *original {
                return Err(invalid(format!("client {k}: pool not conserved")));
            }
        }
        Ok(())
    }
}

/// Uniform random `budget` instances per client, without replacement.
pub fn make_initial_labels(split: &ClientSplit, budget: usize, seed: u64) -> Result<LabelState> {
    let mut clients = Vec::with_capacity(split.clients.len());
    for (k, pool) in split.clients.iter().enumerate() {
        if budget > pool.len() {
            return Err(invalid(format!(
                "budget {budget} exceeds client {k}'s pool of {}",
                pool.len()
            )));
        }
        let mut rng = rng_from(derive_seed(seed, Stream::InitialLabels, k as u64, 0));
        let picked = index::sample(&mut rng, pool.len(), budget).into_vec();
        let mut chosen = vec![false; pool.len()];
        picked.iter().for_each(|&p| chosen[p] = true);
        clients.push(ClientPool {
            labeled: picked.iter().map(|&p| pool[p]).collect(),
            unlabeled: pool
                .iter()
                .zip(&chosen)
                .filter(|(_, &c)| !c)
                .map(|(&i, _)| i)
                .collect(),
        });
    }
    Ok(LabelState { clients })
}

/// `Σ_k w_k θ_k`, summed in client order.
pub fn aggregate(models: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    if models.is_empty() || models.len() != weights.len() {
        return Err(invalid("aggregation needs one weight per model"));
    }
    let mut out = ModelParams::zeros(&models[0].arch);
    for (m, &w) in models.iter().zip(weights) {
        if m.arch != out.arch {
            return Err(invalid("cannot aggregate models with different architectures"));
        }
        out.add_scaled(m, w);
    }
    Ok(out)
}

/// Weights `|D_k| / |D|`.
pub fn aggregation_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&s| s as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub fl_round: usize,
    pub client: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone)]
pub struct FedOutcome {
    pub params: ModelParams,
    pub log: Vec<TrainLogRow>,
}

pub fn fedavg(
    init: &ModelParams,
    dataset: &Dataset,
    state: &LabelState,
    config: &FedConfig,
    seed: u64,
) -> Result<FedOutcome> {
    fedavg_observed(init, dataset, state, config, seed, &mut |_, _| {})
}

/// FedAvg with a callback invoked with `(fl_round, global model)` after each
/// aggregation.
pub fn fedavg_observed(
    init: &ModelParams,
    dataset: &Dataset,
    state: &LabelState,
    config: &FedConfig,
    seed: u64,
    observer: &mut dyn FnMut(usize, &ModelParams),
) -> Result<FedOutcome> {
    config.validate()?;
    if state.clients.is_empty() {
        return Err(invalid("federation needs at least one client"));
    }
    if let Some(k) = state.clients.iter().position(|c| c.labeled.is_empty()) {
        return Err(invalid(format!("client {k} has no labeled data")));
    }
    let sizes: Vec<usize> = state.clients.iter().map(|c| c.labeled.len()).collect();
    let weights = aggregation_weights(&sizes);
    let mut global = init.clone();
    let mut log = Vec::with_capacity(config.fl_rounds * state.clients.len());

    for round in 0..config.fl_rounds {
        let local_update = |(k, pool): (usize, &ClientPool)| -> Result<TrainOutcome> {
            let samples = dataset.samples(&pool.labeled);
            let cfg = config.client_config(round, derive_seed(seed, Stream::FedClient, round as u64, k as u64));
            sgd_train(&global, &samples, &cfg)
        };
        #[cfg(feature = "parallel")]
        let updates: Vec<TrainOutcome> = {
            use rayon::prelude::*;
            state
                .clients
                .par_iter()
                .enumerate()
                .map(local_update)
                .collect::<Result<_>>()?
        };
        #[cfg(not(feature = "parallel"))]
        let updates: Vec<TrainOutcome> = state
            .clients
            .iter()
            .enumerate()
            .map(local_update)
            .collect::<Result<_>>()?;

        for (k, u) in updates.iter().enumerate() {
            log.push(TrainLogRow {
                fl_round: round,
                client: k,
                train_loss: u.train_loss,
                train_acc: u.train_acc,
            });
        }
        let models: Vec<ModelParams> = updates.into_iter().map(|u| u.params).collect();
        global = aggregate(&models, &weights)?;
        observer(round, &global);
    }
    Ok(FedOutcome { params: global, log })
}

/// Fresh model trained only on one client's labeled data.
pub fn train_local_only(
    dataset: &Dataset,
    state: &LabelState,
    client: usize,
    arch: &Architecture,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let pool = state
        .clients
        .get(client)
        .ok_or_else(|| invalid(format!("no client {client}")))?;
    if pool.labeled.is_empty() {
        return Err(invalid(format!("client {client} has no labeled data")));
    }
    let init = init_params(arch, derive_seed(seed, Stream::ModelInit, client as u64, 1))?;
    let cfg = TrainConfig {
        seed: derive_seed(seed, Stream::LocalOnly, client as u64, 0),
        ..config.clone()
    };
    sgd_train(&init, &dataset.samples(&pool.labeled), &cfg)
}

/// Settings for local-only training: 50 epochs, early stop at 99% train accuracy.
pub fn local_only_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        early_stop_train_acc: Some(0.99),
        ..base.clone()
    }
}
