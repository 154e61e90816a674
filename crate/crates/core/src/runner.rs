//! The alternating query / FedAvg loop, grids of runs, pairwise comparison and
//! report generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{AccuracyMode, ExperimentConfig};
use crate::data::{induce_global_imbalance, partition_dirichlet, ClientSplit, Dataset, PartitionConfig};
use crate::error::{invalid, Result};
use crate::federation::{
    fedavg_observed, make_initial_labels, train_local_only, InitMode, LabelState,
};
use crate::metrics::{self, critical_value, global_emd, local_emd, AccuracySeries};
use crate::model::{evaluate, init_params, Architecture, ModelParams};
use crate::rng::{derive_seed, Stream};
use crate::strategies::{select, QueryContext, QuerySpec, Selector, StrategyKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub al_round: usize,
    pub labeled_per_client: usize,
    /// Cumulative labeled fraction of the per-client pool.
    pub budget_frac: f64,
    pub test_acc: f64,
    pub local_emd: f64,
    pub global_emd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub al_round: usize,
    pub fl_round: usize,
    pub client: usize,
    pub train_loss: f64,
    pub train_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    /// `queries[r][k]`: indices labeled by client `k` in AL round `r + 1`
    /// (round 1 is the random initial set).
    pub queries: Vec<Vec<Vec<usize>>>,
    pub error: Option<String>,
    #[serde(skip)]
    pub train_log: Vec<TrainLogRecord>,
    #[serde(skip)]
    pub checkpoints: Vec<ModelParams>,
    #[serde(skip)]
    pub final_state: Option<LabelState>,
}

impl SeedRun {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub setting: String,
    pub strategy: String,
    pub runs: Vec<SeedRun>,
}

impl ExperimentResult {
    /// Strategy column of the accuracy table.
    pub fn strategy_name(&self) -> String {
        let q = &self.config.query;
        match q.strategy {
            StrategyKind::EnsLogit | StrategyKind::EnsRank | StrategyKind::Finetune => {
                format!("{}-{}", q.strategy, q.base)
            }
            _ => q.strategy.to_string(),
        }
    }

    /// Selector column of the accuracy table.
    pub fn selector_name(&self) -> String {
        let q = &self.config.query;
        match q.strategy {
            StrategyKind::Logo | StrategyKind::EnsLogit | StrategyKind::EnsRank => "both".into(),
            StrategyKind::Finetune => Selector::Global.to_string(),
            _ => q.selector.to_string(),
        }
    }

    pub fn series(&self, seeds: &[u64]) -> AccuracySeries {
        let rounds = self.config.rounds;
        let by_seed: Vec<&SeedRun> = seeds
            .iter()
            .map(|s| self.runs.iter().find(|r| r.seed == *s).expect("seed present"))
            .collect();
        AccuracySeries {
            strategy: self.strategy.clone(),
            rounds: (0..rounds)
                .map(|r| by_seed.iter().map(|run| run.rounds[r].test_acc).collect())
                .collect(),
        }
    }

    fn successful_seeds(&self) -> BTreeSet<u64> {
        self.runs.iter().filter(|r| r.succeeded()).map(|r| r.seed).collect()
    }
}

struct Prepared {
    train: Dataset,
    test: Dataset,
}

/// Runs every configured seed; a failing seed is recorded, not propagated.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let (train, test) = config.dataset.load()?;
    let prepared = Prepared { train, test };
    let run = |&seed: &u64| -> SeedRun {
        run_seed(config, &prepared, seed).unwrap_or_else(|e| SeedRun {
            seed,
            rounds: Vec::new(),
            queries: Vec::new(),
            error: Some(e.to_string()),
            train_log: Vec::new(),
            checkpoints: Vec::new(),
            final_state: None,
        })
    };
    #[cfg(feature = "parallel")]
    let runs = {
        use rayon::prelude::*;
        config.seeds.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let runs = config.seeds.iter().map(run).collect();
    Ok(ExperimentResult {
        config: config.clone(),
        config_hash: config.hash(),
        setting: config.setting(),
        strategy: config.query.label(),
        runs,
    })
}

/// Everything a single seed produces before evaluation.
pub struct SeedSetup {
    pub train: Dataset,
    pub split: ClientSplit,
    pub arch: Architecture,
    pub budget: usize,
}

/// The imbalanced training set and its client split for one seed.
pub fn partition_for_seed(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<(Dataset, ClientSplit)> {
    let train = induce_global_imbalance(train, config.partition.rho, derive_seed(seed, Stream::Imbalance, 0, 0))?;
    let split = partition_dirichlet(
        &train,
        &PartitionConfig {
            num_clients: config.partition.num_clients,
            alpha: config.partition.alpha,
            rho: config.partition.rho,
            seed: derive_seed(seed, Stream::Partition, 0, 0),
        },
    )?;
    Ok((train, split))
}

/// Imbalance induction, partitioning and the per-round budget for one seed.
pub fn prepare_seed(config: &ExperimentConfig, train: &Dataset, seed: u64) -> Result<SeedSetup> {
    let (train, split) = partition_for_seed(config, train, seed)?;
    let pool = split.clients.iter().map(Vec::len).min().unwrap_or(0);
    let budget = config.budget.per_round(pool);
    if budget * config.rounds > pool {
        return Err(invalid(format!(
            "{} rounds of {budget} labels exceed the per-client pool of {pool}",
            config.rounds
        )));
    }
    let arch = config.architecture(train.dim(), train.num_classes)?;
    Ok(SeedSetup {
        train,
        split,
        arch,
        budget,
    })
}

fn check_budget(state: &LabelState, round: usize, budget: usize) -> Result<()> {
    for (k, pool) in state.clients.iter().enumerate() {
        if pool.labeled.len() != round * budget {
            return Err(invalid(format!(
                "client {k} holds {} labels after round {round}, expected {}",
                pool.labeled.len(),
                round * budget
            )));
        }
    }
    Ok(())
}

fn run_seed(config: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<SeedRun> {
    let SeedSetup {
        train,
        split,
        arch,
        budget,
    } = prepare_seed(config, &prepared.train, seed)?;
    let test = prepared.test.all_samples();
    let pool_size = split.clients.iter().map(Vec::len).min().unwrap_or(1);
    let init = init_params(&arch, derive_seed(seed, Stream::ModelInit, 0, 0))?;
    let local_cfg = config.local_only_train();

    let mut state = make_initial_labels(&split, budget, derive_seed(seed, Stream::InitialLabels, 0, 0))?;
    let mut queries = vec![state.clients.iter().map(|c| c.labeled.clone()).collect::<Vec<_>>()];
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut train_log = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global: Option<ModelParams> = None;

    for al_round in 1..=config.rounds {
        if let Some(current) = global.as_ref() {
            let locals: Vec<Option<ModelParams>> = if config.query.needs_local_model() {
                (0..state.num_clients())
                    .map(|k| {
                        train_local_only(
                            &train,
                            &state,
                            k,
                            &arch,
                            &local_cfg,
                            derive_seed(seed, Stream::LocalOnly, al_round as u64, 0),
                        )
                        .map(|o| Some(o.params))
                    })
                    .collect::<Result<_>>()?
            } else {
                vec![None; state.num_clients()]
            };
            let mut picked_this_round = Vec::with_capacity(state.num_clients());
            for (k, local) in locals.iter().enumerate() {
                let pool = &state.clients[k];
                let ctx = QueryContext {
                    client: k,
                    dataset: &train,
                    unlabeled: &pool.unlabeled,
                    labeled: &pool.labeled,
                    global: current,
                    local: local.as_ref(),
                    budget,
                    seed: derive_seed(seed, Stream::Query, al_round as u64, k as u64),
                };
                picked_this_round.push(select(&ctx, &config.query, &config.federation.train)?);
            }
            for (k, picks) in picked_this_round.iter().enumerate() {
                state.reveal(k, picks)?;
            }
            queries.push(picked_this_round);
        }
        state.check_invariants(&split)?;
        check_budget(&state, al_round, budget)?;

        let start = match (config.federation.init_mode, global.take()) {
            (InitMode::Continue, Some(prev)) => prev,
            _ => init.clone(),
        };
        let fl_rounds = config.federation.fl_rounds;
        let tail = fl_rounds.saturating_sub(5);
        let mut tail_acc = Vec::new();
        let mut observer = |fl_round: usize, model: &ModelParams| {
            if config.accuracy == AccuracyMode::Last5 && fl_round >= tail {
                tail_acc.push(evaluate(model, &test).unwrap_or(0.0));
            }
        };
        let outcome = fedavg_observed(
            &start,
            &train,
            &state,
            &config.federation,
            derive_seed(seed, Stream::FedClient, al_round as u64, u64::MAX),
            &mut observer,
        )?;
        train_log.extend(outcome.log.iter().map(|row| TrainLogRecord {
            al_round,
            fl_round: row.fl_round,
            client: row.client,
            train_loss: row.train_loss,
            train_acc: row.train_acc,
        }));
        let test_acc = match config.accuracy {
            AccuracyMode::Final => evaluate(&outcome.params, &test)?,
            AccuracyMode::Last5 => tail_acc.iter().sum::<f64>() / tail_acc.len() as f64,
        };
        rounds.push(RoundRecord {
            al_round,
            labeled_per_client: al_round * budget,
            budget_frac: (al_round * budget) as f64 / pool_size as f64,
            test_acc,
            local_emd: local_emd(&train, &state, config.emd_norm),
            global_emd: global_emd(&train, &state, config.emd_norm),
        });
        if config.save_checkpoints {
            checkpoints.push(outcome.params.clone());
        }
        global = Some(outcome.params);
    }
    Ok(SeedRun {
        seed,
        rounds,
        queries,
        error: None,
        train_log,
        checkpoints,
        final_state: Some(state),
    })
}

/// Runs configs in order (optionally in parallel) and writes each result to
/// its own output directory when `write` is set.
pub fn run_grid(configs: &[ExperimentConfig], parallel: bool, write: bool) -> Result<Vec<ExperimentResult>> {
    if write {
        let dirs: BTreeSet<_> = configs.iter().map(|c| c.resolved_output_dir()).collect();
        if dirs.len() != configs.len() {
            return Err(invalid("grid entries must have distinct output directories"));
        }
    }
    let one = |c: &ExperimentConfig| -> Result<ExperimentResult> {
        let r = run_experiment(c)?;
        if write {
            write_artifacts(&r, &c.resolved_output_dir())?;
        }
        Ok(r)
    };
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return configs.par_iter().map(one).collect();
    }
    let _ = parallel;
    configs.iter().map(one).collect()
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    let bytes = w.into_inner().map_err(|e| invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// File name → contents for one experiment.
pub fn experiment_artifacts(result: &ExperimentResult) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    let strategy = result.strategy_name();
    let selector = result.selector_name();
    let ok_runs = || result.runs.iter().filter(|r| r.succeeded());
    files.insert(
        "accuracy.csv".into(),
        csv_string(
            &["strategy", "selector", "seed", "al_round", "budget_frac", "test_acc"],
            ok_runs().flat_map(|run| {
                run.rounds.iter().map(|r| {
                    vec![
                        strategy.clone(),
                        selector.clone(),
                        run.seed.to_string(),
                        r.al_round.to_string(),
                        r.budget_frac.to_string(),
                        r.test_acc.to_string(),
                    ]
                })
            }),
        )?,
    );
    files.insert(
        "emd.csv".into(),
        csv_string(
            &["strategy", "selector", "seed", "al_round", "local_emd", "global_emd"],
            ok_runs().flat_map(|run| {
                run.rounds.iter().map(|r| {
                    vec![
                        strategy.clone(),
                        selector.clone(),
                        run.seed.to_string(),
                        r.al_round.to_string(),
                        r.local_emd.to_string(),
                        r.global_emd.to_string(),
                    ]
                })
            }),
        )?,
    );
    for run in &result.runs {
        if let Some(err) = &run.error {
            files.insert(format!("error_seed{}.txt", run.seed), format!("{err}\n"));
            continue;
        }
        files.insert(
            format!("train_log_seed{}.csv", run.seed),
            csv_string(
                &["al_round", "fl_round", "client", "train_loss", "train_acc"],
                run.train_log.iter().map(|l| {
                    vec![
                        l.al_round.to_string(),
                        l.fl_round.to_string(),
                        l.client.to_string(),
                        l.train_loss.to_string(),
                        l.train_acc.to_string(),
                    ]
                }),
            )?,
        );
        for (r, ckpt) in run.checkpoints.iter().enumerate() {
            files.insert(format!("checkpoints/seed{}_round{}.json", run.seed, r + 1), ckpt.to_json()?);
        }
    }
    files.insert("summary.json".into(), serde_json::to_string_pretty(result)?);
    Ok(files)
}

pub fn write_files(files: &BTreeMap<String, String>, dir: &Path) -> Result<()> {
    for (name, contents) in files {
        let path = dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, contents)?;
    }
    Ok(())
}

pub fn write_artifacts(result: &ExperimentResult, dir: &Path) -> Result<()> {
    write_files(&experiment_artifacts(result)?, dir)
}

pub fn load_result(path: &Path) -> Result<ExperimentResult> {
    let path = if path.is_dir() { path.join("summary.json") } else { path.to_path_buf() };
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub setting: String,
    pub strategy_i: String,
    pub strategy_j: String,
    pub seeds: Vec<u64>,
    pub threshold: f64,
    pub t_scores: Vec<f64>,
    pub winning_rate: f64,
}

/// Paired comparison over seeds present in both results. Seed lists must
/// agree; seeds that failed in either run are dropped as long as two remain.
pub fn compare(a: &ExperimentResult, b: &ExperimentResult) -> Result<Comparison> {
    let seeds_a: Vec<u64> = a.runs.iter().map(|r| r.seed).collect();
    let seeds_b: Vec<u64> = b.runs.iter().map(|r| r.seed).collect();
    if seeds_a.len() != seeds_b.len() || seeds_a.iter().collect::<BTreeSet<_>>() != seeds_b.iter().collect() {
        return Err(invalid(format!(
            "cannot pair seed sets {seeds_a:?} and {seeds_b:?}"
        )));
    }
    if a.config.rounds != b.config.rounds {
        return Err(invalid("results cover different numbers of AL rounds"));
    }
    let seeds: Vec<u64> = a.successful_seeds().intersection(&b.successful_seeds()).copied().collect();
    if seeds.len() < 2 {
        let failed: Vec<String> = a
            .runs
            .iter()
            .chain(&b.runs)
            .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        return Err(invalid(format!(
            "only {} paired seeds succeeded; failures: {}",
            seeds.len(),
            failed.join("; ")
        )));
    }
    let si = a.series(&seeds);
    let sj = b.series(&seeds);
    let t_scores = metrics::round_t_scores(&si, &sj)?;
    let threshold = critical_value(seeds.len());
    Ok(Comparison {
        setting: a.setting.clone(),
        strategy_i: a.strategy.clone(),
        strategy_j: b.strategy.clone(),
        seeds,
        threshold,
        winning_rate: metrics::winning_rate_from_t(&t_scores, threshold),
        t_scores,
    })
}

fn t_json(t: f64) -> serde_json::Value {
    if t.is_finite() {
        serde_json::json!(t)
    } else if t > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

/// Accuracy CSVs per strategy, an EMD trace, the penalty matrix (two or more
/// strategies), the t-score table and a readable summary.
pub fn report(results: &[ExperimentResult]) -> Result<BTreeMap<String, String>> {
    if results.is_empty() {
        return Err(invalid("nothing to report"));
    }
    let mut files = BTreeMap::new();
    let strategies: BTreeSet<String> = results.iter().map(|r| r.strategy.clone()).collect();
    let mut settings: BTreeMap<String, Vec<&ExperimentResult>> = BTreeMap::new();
    for r in results {
        settings.entry(r.setting.clone()).or_default().push(r);
    }

    for s in &strategies {
        let rows = results.iter().filter(|r| &r.strategy == s).flat_map(|res| {
            res.runs.iter().filter(|r| r.succeeded()).flat_map(move |run| {
                run.rounds.iter().map(move |r| {
                    vec![
                        res.setting.clone(),
                        res.strategy_name(),
                        res.selector_name(),
                        run.seed.to_string(),
                        r.al_round.to_string(),
                        r.budget_frac.to_string(),
                        r.test_acc.to_string(),
                    ]
                })
            })
        });
        files.insert(
            format!("accuracy_{}.csv", file_safe(s)),
            csv_string(
                &["setting", "strategy", "selector", "seed", "al_round", "budget_frac", "test_acc"],
                rows,
            )?,
        );
    }
    let emd_rows = results.iter().flat_map(|res| {
        res.runs.iter().filter(|r| r.succeeded()).flat_map(move |run| {
            run.rounds.iter().map(move |r| {
                vec![
                    res.setting.clone(),
                    res.strategy.clone(),
                    run.seed.to_string(),
                    r.al_round.to_string(),
                    r.local_emd.to_string(),
                    r.global_emd.to_string(),
                ]
            })
        })
    });
    files.insert(
        "emd.csv".into(),
        csv_string(&["setting", "strategy", "seed", "al_round", "local_emd", "global_emd"], emd_rows)?,
    );

    let mut summary = String::new();
    writeln!(summary, "{} results, {} settings, {} strategies", results.len(), settings.len(), strategies.len()).unwrap();
    for (setting, rs) in &settings {
        writeln!(summary, "\n[{setting}]").unwrap();
        for r in rs {
            let ok: Vec<&SeedRun> = r.runs.iter().filter(|x| x.succeeded()).collect();
            let last: Vec<f64> = ok.iter().filter_map(|x| x.rounds.last().map(|l| l.test_acc)).collect();
            let mean = last.iter().sum::<f64>() / last.len().max(1) as f64;
            writeln!(
                summary,
                "  {:<20} final acc {:.4} over {}/{} seeds",
                r.strategy,
                mean,
                ok.len(),
                r.runs.len()
            )
            .unwrap();
        }
    }

    if strategies.len() >= 2 {
        let mut per_setting = Vec::new();
        let mut table = serde_json::Map::new();
        for (setting, rs) in &settings {
            let mut common: Option<BTreeSet<u64>> = None;
            for r in rs {
                let s = r.successful_seeds();
                common = Some(match common {
                    None => s,
                    Some(c) => c.intersection(&s).copied().collect(),
                });
            }
            let seeds: Vec<u64> = common.unwrap_or_default().into_iter().collect();
            if seeds.len() < 2 {
                writeln!(summary, "\n[{setting}] skipped in penalty matrix: fewer than 2 common seeds").unwrap();
                continue;
            }
            per_setting.push(rs.iter().map(|r| r.series(&seeds)).collect::<Vec<_>>());
            let mut pairs = serde_json::Map::new();
            for a in rs {
                for b in rs {
                    if a.strategy == b.strategy {
                        continue;
                    }
                    let ts = metrics::round_t_scores(&a.series(&seeds), &b.series(&seeds))?;
                    let rounds: serde_json::Map<String, serde_json::Value> =
                        ts.iter().enumerate().map(|(r, &t)| ((r + 1).to_string(), t_json(t))).collect();
                    pairs.insert(format!("{}|{}", a.strategy, b.strategy), serde_json::Value::Object(rounds));
                }
            }
            table.insert(setting.clone(), serde_json::Value::Object(pairs));
        }
        let matrix = metrics::penalty_matrix(&per_setting, None)?;
        let mut buf = Vec::new();
        matrix.write_csv(&mut buf)?;
        files.insert("penalty_matrix.csv".into(), String::from_utf8(buf).expect("utf-8"));
        files.insert("tscores.json".into(), serde_json::to_string_pretty(&table)?);
        writeln!(summary, "\npenalty matrix (row beats column):").unwrap();
        for (name, row) in matrix.strategies.iter().zip(&matrix.values) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
            writeln!(summary, "  {:<20} {}", name, cells.join(" ")).unwrap();
        }
    }
    files.insert("summary.txt".into(), summary);
    Ok(files)
}

/// Selection spec for a single-model strategy with the given selector.
pub fn single_model_spec(strategy: StrategyKind, selector: Selector) -> QuerySpec {
    QuerySpec {
        strategy,
        selector,
        ..QuerySpec::default()
    }
}
