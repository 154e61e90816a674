mod common;

use fal_core::config::{Budget, DatasetSpec, ExperimentConfig};
use fal_core::data::Concentration;
use fal_core::federation::InitMode;
use fal_core::metrics::critical_value;
use fal_core::runner::*;
use fal_core::strategies::{Selector, StrategyKind};

/// Three clients, 20 examples each at α = ∞.
fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            num_classes: 3,
            per_class: 20,
            test_per_class: 20,
            dim: 4,
            separation: 2.5,
            seed: 1,
        },
        budget: Budget::Count(4),
        rounds: 3,
        seeds: vec![0, 1, 2],
        save_checkpoints: false,
        ..ExperimentConfig::default()
    };
    c.partition.num_clients = 3;
    c.partition.alpha = Concentration::Infinite;
    c.model.hidden = vec![8];
    c.federation.fl_rounds = 4;
    c.federation.local_epochs = 2;
    c.local_only.epochs = 10;
    c
}

fn with_strategy(base: &ExperimentConfig, strategy: StrategyKind, selector: Selector) -> ExperimentConfig {
    ExperimentConfig {
        query: single_model_spec(strategy, selector),
        ..base.clone()
    }
}

fn accuracies(r: &ExperimentResult) -> Vec<Vec<f64>> {
    r.runs.iter().map(|s| s.rounds.iter().map(|x| x.test_acc).collect()).collect()
}

#[test]
fn single_round_ignores_the_strategy() {
    let base = ExperimentConfig {
        rounds: 1,
        ..small_config()
    };
    let reference = run_experiment(&with_strategy(&base, StrategyKind::Random, Selector::Global)).unwrap();
    for (s, sel) in [
        (StrategyKind::Entropy, Selector::Global),
        (StrategyKind::Coreset, Selector::Local),
        (StrategyKind::Logo, Selector::Global),
        (StrategyKind::EnsRank, Selector::Global),
    ] {
        let r = run_experiment(&with_strategy(&base, s, sel)).unwrap();
        assert_eq!(accuracies(&r), accuracies(&reference), "{s}");
    }
}

#[test]
fn exhausting_the_pool_gives_identical_final_sets() {
    let base = ExperimentConfig {
        budget: Budget::Count(5),
        rounds: 4,
        ..small_config()
    };
    let random = run_experiment(&with_strategy(&base, StrategyKind::Random, Selector::Global)).unwrap();
    let entropy = run_experiment(&with_strategy(&base, StrategyKind::Entropy, Selector::Global)).unwrap();
    for (a, b) in random.runs.iter().zip(&entropy.runs) {
        assert!(a.succeeded() && b.succeeded());
        let sa = a.final_state.as_ref().unwrap();
        let sb = b.final_state.as_ref().unwrap();
        for (ca, cb) in sa.clients.iter().zip(&sb.clients) {
            assert!(ca.unlabeled.is_empty() && cb.unlabeled.is_empty());
            assert_eq!(common::sorted(ca.labeled.clone()), common::sorted(cb.labeled.clone()));
        }
    }
}

#[test]
fn reruns_are_bit_identical() {
    let cfg = with_strategy(&small_config(), StrategyKind::Logo, Selector::Global);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(experiment_artifacts(&a).unwrap(), experiment_artifacts(&b).unwrap());
}

#[test]
fn budget_accounting_and_query_log() {
    let cfg = with_strategy(&small_config(), StrategyKind::Badge, Selector::Local);
    let r = run_experiment(&cfg).unwrap();
    for run in &r.runs {
        assert!(run.succeeded(), "{:?}", run.error);
        assert_eq!(run.queries.len(), 3);
        for (i, rec) in run.rounds.iter().enumerate() {
            assert_eq!(rec.labeled_per_client, 4 * (i + 1));
            assert!((rec.budget_frac - rec.labeled_per_client as f64 / 20.0).abs() < 1e-12);
        }
        // replaying the query log reproduces the final labeled sets
        let state = run.final_state.as_ref().unwrap();
        for (k, pool) in state.clients.iter().enumerate() {
            let replay: Vec<usize> = run.queries.iter().flat_map(|q| q[k].clone()).collect();
            assert_eq!(replay, pool.labeled);
        }
    }
}

#[test]
fn continue_and_random_init_agree_in_round_one() {
    let random = with_strategy(&small_config(), StrategyKind::Entropy, Selector::Global);
    let mut cont = random.clone();
    cont.federation.init_mode = InitMode::Continue;
    let a = run_experiment(&random).unwrap();
    let b = run_experiment(&cont).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.rounds[0], y.rounds[0]);
        assert_eq!(x.queries[0], y.queries[0]);
    }
    assert_ne!(accuracies(&a), accuracies(&b));
}

#[test]
fn failing_seeds_are_recorded() {
    // 8 rounds of 4 labels cannot fit in a 20-example pool
    let cfg = ExperimentConfig {
        rounds: 8,
        ..small_config()
    };
    let r = run_experiment(&cfg).unwrap();
    assert!(r.runs.iter().all(|s| !s.succeeded()));
    let files = experiment_artifacts(&r).unwrap();
    assert!(files.contains_key("error_seed0.txt"));
    assert!(compare(&r, &r).is_err());
}

fn two_configs(dir: &std::path::Path) -> Vec<ExperimentConfig> {
    [StrategyKind::Random, StrategyKind::Entropy]
        .into_iter()
        .map(|s| {
            let mut c = with_strategy(&small_config(), s, Selector::Global);
            c.output_dir = Some(dir.join(s.to_string()));
            c
        })
        .collect()
}

fn read_tree(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn parallel_and_serial_grids_write_identical_bytes() {
    // both grids write to the same place since summaries embed the output path
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("grid");
    let serial = run_grid(&two_configs(&root), false, true).unwrap();
    let a = read_tree(&root);
    let reloaded = load_result(&root.join("entropy")).unwrap();
    std::fs::remove_dir_all(&root).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    pool.install(|| run_grid(&two_configs(&root), true, true).unwrap());
    let b = read_tree(&root);
    assert_eq!(serial.len(), 2);
    assert_eq!(serial[0].strategy, "random");
    assert_eq!(serial[1].strategy, "entropy-global");
    assert!(a.iter().any(|(n, _)| n.ends_with("summary.json")));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x == y, "{} differs", x.0);
    }

    assert_eq!(reloaded.runs[0].rounds, serial[1].runs[0].rounds);
    assert_eq!(reloaded.runs[0].queries, serial[1].runs[0].queries);
}

#[test]
fn grid_of_one_is_a_single_run() {
    let cfg = with_strategy(&small_config(), StrategyKind::Coreset, Selector::Global);
    let grid = run_grid(std::slice::from_ref(&cfg), true, false).unwrap();
    assert_eq!(grid[0], run_experiment(&cfg).unwrap());

    let dir = tempfile::tempdir().unwrap();
    let mut configs = two_configs(dir.path());
    configs[1].output_dir = configs[0].output_dir.clone();
    assert!(run_grid(&configs, false, true).is_err());
}

fn fake_result(strategy: &str, setting: &str, acc: &[[f64; 2]]) -> ExperimentResult {
    let cfg = ExperimentConfig {
        rounds: 2,
        seeds: (0..acc.len() as u64).collect(),
        ..ExperimentConfig::default()
    };
    ExperimentResult {
        config_hash: cfg.hash(),
        config: cfg,
        setting: setting.into(),
        strategy: strategy.into(),
        runs: acc
            .iter()
            .enumerate()
            .map(|(seed, rounds)| SeedRun {
                seed: seed as u64,
                rounds: rounds
                    .iter()
                    .enumerate()
                    .map(|(r, &test_acc)| RoundRecord {
                        al_round: r + 1,
                        labeled_per_client: r + 1,
                        budget_frac: 0.1 * (r + 1) as f64,
                        test_acc,
                        local_emd: 0.0,
                        global_emd: 0.0,
                    })
                    .collect(),
                queries: Vec::new(),
                error: None,
                train_log: Vec::new(),
                checkpoints: Vec::new(),
                final_state: None,
            })
            .collect(),
    }
}

#[test]
fn compare_by_hand() {
    let a = fake_result("a", "s", &[[0.5, 0.70], [0.5, 0.72], [0.5, 0.68], [0.5, 0.74]]);
    let b = fake_result("b", "s", &[[0.5, 0.60], [0.5, 0.61], [0.5, 0.59], [0.5, 0.62]]);
    let c = compare(&a, &b).unwrap();
    assert_eq!(c.t_scores[0], 0.0);
    assert!((c.t_scores[1] - 16.27).abs() < 0.01);
    assert_eq!(c.threshold, 2.776);
    assert_eq!(c.winning_rate, 0.5);
    assert_eq!(compare(&a, &a).unwrap().winning_rate, 0.0);

    let short = fake_result("b", "s", &[[0.5, 0.60], [0.5, 0.61], [0.5, 0.59]]);
    assert!(compare(&a, &short).is_err());
}

#[test]
fn compare_drops_failed_seeds() {
    let a = fake_result("a", "s", &[[0.5, 0.70], [0.5, 0.72], [0.5, 0.68], [0.5, 0.74]]);
    let mut b = fake_result("b", "s", &[[0.5, 0.60], [0.5, 0.61], [0.5, 0.59], [0.5, 0.62]]);
    b.runs[3].error = Some("diverged".into());
    b.runs[3].rounds.clear();
    let c = compare(&a, &b).unwrap();
    assert_eq!(c.seeds, vec![0, 1, 2]);
    assert_eq!(c.threshold, critical_value(3));
}

#[test]
fn report_bundles() {
    assert!(report(&[]).is_err());

    let a = fake_result("a", "s1", &[[0.5, 0.70], [0.5, 0.72], [0.5, 0.68], [0.5, 0.74]]);
    let single = report(std::slice::from_ref(&a)).unwrap();
    assert!(single.contains_key("accuracy_a.csv"));
    assert!(single.contains_key("summary.txt"));
    assert!(!single.contains_key("penalty_matrix.csv"));

    let b = fake_result("b", "s1", &[[0.5, 0.60], [0.5, 0.61], [0.5, 0.59], [0.5, 0.62]]);
    let a2 = ExperimentResult {
        setting: "s2".into(),
        ..a.clone()
    };
    let b2 = ExperimentResult {
        setting: "s2".into(),
        ..b.clone()
    };
    let files = report(&[a, b, a2, b2]).unwrap();
    let matrix = &files["penalty_matrix.csv"];
    let mut rows = csv::Reader::from_reader(matrix.as_bytes());
    let header = rows.headers().unwrap().clone();
    let body: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    // a beats b in round 2 of each setting: 0.5 + 0.5
    assert_eq!(header.len(), 3);
    assert_eq!(&body[0][0], "a");
    assert_eq!(body[0][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(body[0][2].parse::<f64>().unwrap(), 1.0);
    assert_eq!(body[1][2].parse::<f64>().unwrap(), 0.0);
    let t: serde_json::Value = serde_json::from_str(&files["tscores.json"]).unwrap();
    assert_eq!(t["s1"]["a|b"]["1"], serde_json::json!(0.0));
}
