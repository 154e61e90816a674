//! Query selection: Random, Entropy, CoreSet, BADGE, LoGo and the two-model
//! ensembles. Every strategy returns exactly `budget` distinct indices drawn
//! from the client's unlabeled pool.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans_pp_order, lloyd, Clustering, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::linalg::{mean, sq_dist};
use crate::model::{entropy, forward, full_gradient, pseudo_label_gradient, sgd_train, softmax, ModelParams, Prediction, TrainConfig};
use crate::rng::{derive_seed, rng_from, Stream};

/// Which model a single-model strategy scores with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Random,
    Entropy,
    Coreset,
    Badge,
    Logo,
    EnsLogit,
    EnsRank,
    Finetune,
}

/// Base strategy combined by the ensembles and fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseStrategy {
    Entropy,
    Badge,
}

/// Per-cluster pick rule of the LoGo micro step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MicroRule {
    #[default]
    Entropy,
    Random,
}

macro_rules! string_enum {
    ($ty:ty, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = crate::error::FalError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(invalid(format!("unknown {} {other:?}", stringify!($ty)))),
                }
            }
        }
    };
}

string_enum!(Selector, Selector::Global => "global", Selector::Local => "local");
string_enum!(
    StrategyKind,
    StrategyKind::Random => "random",
    StrategyKind::Entropy => "entropy",
    StrategyKind::Coreset => "coreset",
    StrategyKind::Badge => "badge",
    StrategyKind::Logo => "logo",
    StrategyKind::EnsLogit => "ens_logit",
    StrategyKind::EnsRank => "ens_rank",
    StrategyKind::Finetune => "finetune",
);
string_enum!(BaseStrategy, BaseStrategy::Entropy => "entropy", BaseStrategy::Badge => "badge");
string_enum!(MicroRule, MicroRule::Entropy => "entropy", MicroRule::Random => "random");

/// Complete description of a query strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuerySpec {
    pub strategy: StrategyKind,
    pub selector: Selector,
    pub base: BaseStrategy,
    pub micro: MicroRule,
    pub ft_epochs: usize,
}

impl Default for QuerySpec {
    fn default() -> Self {
        Self {
            strategy: StrategyKind::Entropy,
            selector: Selector::Global,
            base: BaseStrategy::Entropy,
            micro: MicroRule::Entropy,
            ft_epochs: 5,
        }
    }
}

impl QuerySpec {
    pub fn needs_local_model(&self) -> bool {
        match self.strategy {
            StrategyKind::Random | StrategyKind::Finetune => false,
            StrategyKind::Entropy | StrategyKind::Coreset | StrategyKind::Badge => self.selector == Selector::Local,
            StrategyKind::Logo | StrategyKind::EnsLogit | StrategyKind::EnsRank => true,
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self.strategy {
            StrategyKind::Random | StrategyKind::Logo => self.strategy.to_string(),
            StrategyKind::Entropy | StrategyKind::Coreset | StrategyKind::Badge => {
                format!("{}-{}", self.strategy, self.selector)
            }
            StrategyKind::EnsLogit | StrategyKind::EnsRank | StrategyKind::Finetune => {
                format!("{}-{}", self.strategy, self.base)
            }
        }
    }
}

/// Everything a strategy may look at when querying for one client.
#[derive(Debug, Clone, Copy)]
pub struct QueryContext<'a> {
    pub client: usize,
    pub dataset: &'a Dataset,
    /// Sorted unlabeled positions; labels are never read.
    pub unlabeled: &'a [usize],
    pub labeled: &'a [usize],
    pub global: &'a ModelParams,
    pub local: Option<&'a ModelParams>,
    pub budget: usize,
    pub seed: u64,
}

impl<'a> QueryContext<'a> {
    fn check(&self) -> Result<()> {
        if self.budget > self.unlabeled.len() {
            return Err(invalid(format!(
                "budget {} exceeds unlabeled pool of {}",
                self.budget,
                self.unlabeled.len()
            )));
        }
        Ok(())
    }

    pub fn model(&self, selector: Selector) -> Result<&'a ModelParams> {
        match selector {
            Selector::Global => Ok(self.global),
            Selector::Local => self.local_model(),
        }
    }

    fn local_model(&self) -> Result<&'a ModelParams> {
        self.local
            .ok_or_else(|| invalid("strategy needs a local-only model but none was provided"))
    }

    fn pool_predictions(&self, model: &ModelParams) -> Result<Vec<Prediction>> {
        self.unlabeled
            .iter()
            .map(|&i| forward(model, self.dataset.features(i)))
            .collect()
    }

    fn pool_indices(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().map(|&p| self.unlabeled[p]).collect()
    }
}

/// Positions of the `b` largest scores, ties to the lower position.
pub fn top_by_score(scores: &[f64], b: usize) -> Vec<usize> {
    ranking(scores).into_iter().take(b).collect()
}

/// All positions ordered by descending score, ties to the lower position.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

pub fn random_query(ctx: &QueryContext<'_>) -> Result<Vec<usize>> {
    ctx.check()?;
    let mut rng = rng_from(ctx.seed);
    let picks = index::sample(&mut rng, ctx.unlabeled.len(), ctx.budget).into_vec();
    Ok(ctx.pool_indices(&picks))
}

fn entropy_scores(preds: &[Prediction]) -> Vec<f64> {
    preds.iter().map(|p| entropy(&p.probs)).collect()
}

fn entropy_with(ctx: &QueryContext<'_>, model: &ModelParams) -> Result<Vec<usize>> {
    ctx.check()?;
    let scores = entropy_scores(&ctx.pool_predictions(model)?);
    Ok(ctx.pool_indices(&top_by_score(&scores, ctx.budget)))
}

/// The `budget` most uncertain instances under the selected model.
pub fn entropy_query(ctx: &QueryContext<'_>, selector: Selector) -> Result<Vec<usize>> {
    entropy_with(ctx, ctx.model(selector)?)
}

/// Greedy k-center over penultimate embeddings.
pub fn coreset_query(ctx: &QueryContext<'_>, selector: Selector) -> Result<Vec<usize>> {
    ctx.check()?;
    let model = ctx.model(selector)?;
    let pool: Vec<Vec<f64>> = ctx.pool_predictions(model)?.into_iter().map(|p| p.embedding).collect();
    let labeled: Vec<Vec<f64>> = ctx
        .labeled
        .iter()
        .map(|&i| forward(model, ctx.dataset.features(i)).map(|p| p.embedding))
        .collect::<Result<_>>()?;
    Ok(ctx.pool_indices(&k_center_greedy(&pool, &labeled, ctx.budget)))
}

/// Repeatedly takes the pool point farthest from everything chosen so far
/// (labeled centres included). With no centres the first pick is the point
/// farthest from the pool mean.
pub fn k_center_greedy(pool: &[Vec<f64>], centers: &[Vec<f64>], b: usize) -> Vec<usize> {
    let mut min_d: Vec<f64> = if centers.is_empty() {
        let m = mean(pool);
        pool.iter().map(|p| sq_dist(p, &m)).collect()
    } else {
        pool.iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut taken = vec![false; pool.len()];
    let mut picks = Vec::with_capacity(b);
    for _ in 0..b {
        let mut best = None;
        for i in (0..pool.len()).filter(|&i| !taken[i]) {
            if best.is_none_or(|j: usize| min_d[i] > min_d[j]) {
                best = Some(i);
            }
        }
        let Some(next) = best else { break };
        taken[next] = true;
        picks.push(next);
        for (i, p) in pool.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(p, &pool[next]));
        }
    }
    picks
}

fn badge_with_embeddings(ctx: &QueryContext<'_>, embeddings: &[Vec<f64>]) -> Vec<usize> {
    let mut rng = rng_from(ctx.seed);
    ctx.pool_indices(&kmeans_pp_order(embeddings, ctx.budget, &mut rng))
}

fn full_gradients(ctx: &QueryContext<'_>, model: &ModelParams) -> Result<Vec<Vec<f64>>> {
    Ok(ctx.pool_predictions(model)?.iter().map(full_gradient).collect())
}

/// k-means++ seeding on full `C·d` gradient embeddings.
pub fn badge_query(ctx: &QueryContext<'_>, selector: Selector) -> Result<Vec<usize>> {
    ctx.check()?;
    let emb = full_gradients(ctx, ctx.model(selector)?)?;
    Ok(badge_with_embeddings(ctx, &emb))
}

/// Macro-step output: pseudo-label gradient embeddings of the pool under the
/// local-only model and their k-means clustering (indexed by pool position).
#[derive(Debug, Clone)]
pub struct MacroStep {
    pub embeddings: Vec<Vec<f64>>,
    pub clustering: Clustering,
}

pub fn logo_macro(ctx: &QueryContext<'_>) -> Result<MacroStep> {
    ctx.check()?;
    let local = ctx.local_model()?;
    let embeddings: Vec<Vec<f64>> = ctx
        .pool_predictions(local)?
        .iter()
        .map(|p| pseudo_label_gradient(p).1)
        .collect();
    let clustering = lloyd(
        &embeddings,
        ctx.budget,
        derive_seed(ctx.seed, Stream::Query, 0, 1),
        DEFAULT_MAX_ITERS,
        DEFAULT_TOL,
    )?;
    Ok(MacroStep { embeddings, clustering })
}

/// One instance per macro cluster, chosen by the global model.
pub fn logo_micro(clustering: &Clustering, ctx: &QueryContext<'_>, rule: MicroRule) -> Result<Vec<usize>> {
    ctx.check()?;
    if clustering.assignments.len() != ctx.unlabeled.len() {
        return Err(invalid("clustering does not cover the unlabeled pool"));
    }
    if clustering.num_clusters() != ctx.budget {
        return Err(invalid(format!(
            "{} clusters for a budget of {}",
            clustering.num_clusters(),
            ctx.budget
        )));
    }
    let scores = match rule {
        MicroRule::Entropy => entropy_scores(&ctx.pool_predictions(ctx.global)?),
        MicroRule::Random => Vec::new(),
    };
    let mut rng = rng_from(derive_seed(ctx.seed, Stream::Query, 0, 2));
    let mut picks = Vec::with_capacity(ctx.budget);
    for b in 0..clustering.num_clusters() {
        let members = clustering.members(b);
        if members.is_empty() {
            return Err(invalid(format!("cluster {b} is empty")));
        }
        let pick = match rule {
            MicroRule::Entropy => {
                let local: Vec<f64> = members.iter().map(|&m| scores[m]).collect();
                members[top_by_score(&local, 1)[0]]
            }
            MicroRule::Random => members[rng.random_range(0..members.len())],
        };
        picks.push(pick);
    }
    Ok(ctx.pool_indices(&picks))
}

pub fn logo_query(ctx: &QueryContext<'_>, rule: MicroRule) -> Result<Vec<usize>> {
    let step = logo_macro(ctx)?;
    logo_micro(&step.clustering, ctx, rule)
}

fn both_models<'a>(ctx: &QueryContext<'a>) -> Result<(&'a ModelParams, &'a ModelParams)> {
    Ok((ctx.global, ctx.local_model()?))
}

/// Base strategy applied to the average of the two models' logits (Entropy)
/// or gradient embeddings (BADGE).
pub fn ens_logit_query(ctx: &QueryContext<'_>, base: BaseStrategy) -> Result<Vec<usize>> {
    ctx.check()?;
    let (g, l) = both_models(ctx)?;
    let pg = ctx.pool_predictions(g)?;
    let pl = ctx.pool_predictions(l)?;
    match base {
        BaseStrategy::Entropy => {
            let scores: Vec<f64> = pg
                .iter()
                .zip(&pl)
                .map(|(a, b)| {
                    let avg: Vec<f64> = a.logits.iter().zip(&b.logits).map(|(x, y)| 0.5 * (x + y)).collect();
                    entropy(&softmax(&avg))
                })
                .collect();
            Ok(ctx.pool_indices(&top_by_score(&scores, ctx.budget)))
        }
        BaseStrategy::Badge => {
            let emb: Vec<Vec<f64>> = pg
                .iter()
                .zip(&pl)
                .map(|(a, b)| {
                    full_gradient(a)
                        .iter()
                        .zip(full_gradient(b))
                        .map(|(x, y)| 0.5 * (x + y))
                        .collect()
                })
                .collect();
            Ok(badge_with_embeddings(ctx, &emb))
        }
    }
}

/// Rank of every pool position under the base strategy (0 = picked first).
fn base_ranks(ctx: &QueryContext<'_>, model: &ModelParams, base: BaseStrategy) -> Result<Vec<usize>> {
    let order = match base {
        BaseStrategy::Entropy => ranking(&entropy_scores(&ctx.pool_predictions(model)?)),
        BaseStrategy::Badge => {
            let emb = full_gradients(ctx, model)?;
            kmeans_pp_order(&emb, emb.len(), &mut rng_from(ctx.seed))
        }
    };
    let mut ranks = vec![0; order.len()];
    for (r, &p) in order.iter().enumerate() {
        ranks[p] = r;
    }
    Ok(ranks)
}

/// Sums each instance's selection rank under the two models and keeps the
/// `budget` smallest sums.
pub fn ens_rank_query(ctx: &QueryContext<'_>, base: BaseStrategy) -> Result<Vec<usize>> {
    ctx.check()?;
    let (g, l) = both_models(ctx)?;
    let rg = base_ranks(ctx, g, base)?;
    let rl = base_ranks(ctx, l, base)?;
    let neg_sum: Vec<f64> = rg.iter().zip(&rl).map(|(a, b)| -((a + b) as f64)).collect();
    Ok(ctx.pool_indices(&top_by_score(&neg_sum, ctx.budget)))
}

/// Base strategy scored by a copy of the global model fine-tuned on the
/// client's labeled set.
pub fn fine_tune_query(
    ctx: &QueryContext<'_>,
    base: BaseStrategy,
    ft_epochs: usize,
    train: &TrainConfig,
) -> Result<Vec<usize>> {
    ctx.check()?;
    if ctx.labeled.is_empty() {
        return Err(invalid("fine-tuning needs a non-empty labeled set"));
    }
    let tuned;
    let model = if ft_epochs == 0 {
        ctx.global
    } else {
        let cfg = TrainConfig {
            epochs: ft_epochs,
            lr_decay: None,
            early_stop_train_acc: None,
            seed: derive_seed(ctx.seed, Stream::FineTune, ctx.client as u64, 0),
            ..train.clone()
        };
        tuned = sgd_train(ctx.global, &ctx.dataset.samples(ctx.labeled), &cfg)?.params;
        &tuned
    };
    match base {
        BaseStrategy::Entropy => entropy_with(ctx, model),
        BaseStrategy::Badge => Ok(badge_with_embeddings(ctx, &full_gradients(ctx, model)?)),
    }
}

/// Runs the configured strategy and verifies the selection contract.
pub fn select(ctx: &QueryContext<'_>, spec: &QuerySpec, train: &TrainConfig) -> Result<Vec<usize>> {
    let picks = match spec.strategy {
        StrategyKind::Random => random_query(ctx)?,
        StrategyKind::Entropy => entropy_query(ctx, spec.selector)?,
        StrategyKind::Coreset => coreset_query(ctx, spec.selector)?,
        StrategyKind::Badge => badge_query(ctx, spec.selector)?,
        StrategyKind::Logo => logo_query(ctx, spec.micro)?,
        StrategyKind::EnsLogit => ens_logit_query(ctx, spec.base)?,
        StrategyKind::EnsRank => ens_rank_query(ctx, spec.base)?,
        StrategyKind::Finetune => fine_tune_query(ctx, spec.base, spec.ft_epochs, train)?,
    };
    verify_selection(ctx, &picks)?;
    Ok(picks)
}

/// Exactly `budget` distinct indices, all from the unlabeled pool.
pub fn verify_selection(ctx: &QueryContext<'_>, picks: &[usize]) -> Result<()> {
    if picks.len() != ctx.budget {
        return Err(invalid(format!("selected {} instead of {}", picks.len(), ctx.budget)));
    }
    let distinct: HashSet<&usize> = picks.iter().collect();
    if distinct.len() != picks.len() {
        return Err(invalid("selection contains duplicates"));
    }
    if let Some(p) = picks.iter().find(|p| ctx.unlabeled.binary_search(p).is_err()) {
        return Err(invalid(format!("selected index {p} is not unlabeled")));
    }
    Ok(())
}
