//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Run with `cargo test -p fal-core --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use fal_core::clustering::{lloyd, lloyd_best_of, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use fal_core::config::{Budget, DatasetSpec, ExperimentConfig};
use fal_core::data::{Concentration, Dataset};
use fal_core::federation::{fedavg, FedConfig, InitMode};
use fal_core::linalg::sq_dist;
use fal_core::metrics::*;
use fal_core::model::*;
use fal_core::rng::{derive_seed, Stream};
use fal_core::runner::*;
use fal_core::strategies::*;
use rand::Rng as _;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

// 1 -------------------------------------------------------------------------

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut models = 0;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
    for seed in 0..24u64 {
        let mut rng = common::rng(100 + seed);
        let depth = rng.random_range(0..3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..7)).collect();
        let input = rng.random_range(2..6);
        let classes = rng.random_range(2..6);
        let arch = Architecture::new(input, hidden, classes).unwrap();
        let params = common::random_model(&arch, seed, 1.0);
        let ds = common::random_dataset(&mut rng, 5, input, classes);
        let samples = ds.all_samples();

        let (_, grads, _) = loss_and_gradient(&params, &samples).unwrap();
        let base = params.flatten();
        for (i, g) in grads.flatten().iter().enumerate() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = mean_loss(&ModelParams::from_flat(&arch, &plus).unwrap(), &samples).unwrap();
            let lm = mean_loss(&ModelParams::from_flat(&arch, &minus).unwrap(), &samples).unwrap();
            worst = worst.max(rel(*g, (lp - lm) / (2.0 * h)));
        }

        // pseudo-label embedding: d log p_ŷ / d W_ŷ of the output layer
        let x = ds.features(0);
        let (yhat, emb) = gradient_embedding(&params, x).unwrap();
        let last = params.layers.len() - 1;
        let inputs = params.layers[last].inputs;
        for j in 0..inputs {
            let log_p = |d: f64| {
                let mut p = params.clone();
                p.layers[last].weights[yhat * inputs + j] += d;
                forward(&p, x).unwrap().probs[yhat].ln()
            };
            worst = worst.max(rel(emb[j], (log_p(h) - log_p(-h)) / (2.0 * h)));
        }
        models += 1;
    }
    let t = start.elapsed();
    outcome(
        worst < 1e-4 && models >= 20 && within(t, 10),
        format!("{models} models, max rel err {worst:.2e}, {:.2}s", t.as_secs_f64()),
    )
}

// 2 -------------------------------------------------------------------------

fn fedavg_equivalence() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut rng = common::rng(200 + seed);
        let ds = common::random_dataset(&mut rng, 40, 5, 4);
        let state = common::state((0..4).map(|k| (k * 10..(k + 1) * 10).collect()).collect(), vec![vec![]; 4]);
        let arch = Architecture::new(5, vec![7, 6], 4).unwrap();
        let init = common::random_model(&arch, seed, 1.0);
        let train = TrainConfig {
            learning_rate: 0.2,
            momentum: 0.0,
            epochs: 1,
            batch_size: 0,
            lr_decay: None,
            early_stop_train_acc: None,
            seed: 0,
        };
        let fed = FedConfig {
            fl_rounds: 1,
            local_epochs: 1,
            init_mode: InitMode::Random,
            train: train.clone(),
        };
        let out = fedavg(&init, &ds, &state, &fed, seed).unwrap();
        // centralised step written out directly: θ − η · mean gradient
        let (_, g, _) = loss_and_gradient(&init, &ds.all_samples()).unwrap();
        let expected: Vec<f64> = init.flatten().iter().zip(g.flatten()).map(|(p, g)| p - 0.2 * g).collect();
        for (a, e) in out.params.flatten().iter().zip(&expected) {
            worst = worst.max((a - e).abs());
        }
    }
    let t = start.elapsed();
    outcome(worst <= 1e-6 && within(t, 5), format!("10 instances, max |Δθ| {worst:.2e}, {:.2}s", t.as_secs_f64()))
}

// 3 -------------------------------------------------------------------------

fn kmeans_oracle() -> Outcome {
    let start = Instant::now();
    let mut optimal = 0;
    let mut violations = 0;
    for inst in 0..100u64 {
        let mut rng = common::rng(300 + inst);
        let n = rng.random_range(3..=8);
        let b = rng.random_range(1..=3usize.min(n));
        let dim = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n).map(|_| common::gaussian(&mut rng, dim, 2.0)).collect();
        let best = lloyd_best_of(&points, b, inst, 10, DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
        for r in 0..10 {
            let run = lloyd(&points, b, derive_seed(inst, Stream::Query, r, 0), DEFAULT_MAX_ITERS, DEFAULT_TOL).unwrap();
            violations += run.history.windows(2).filter(|w| w[1] > w[0]).count();
        }
        let brute = common::brute_force_kmeans(&points, b);
        if best.objective <= brute + 1e-9 * brute.max(1.0) {
            optimal += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        optimal >= 95 && violations == 0 && within(t, 30),
        format!("{optimal}/100 optimal, {violations} J increases, {:.2}s", t.as_secs_f64()),
    )
}

// 4 -------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let t = t_score(&[0.70, 0.72, 0.68, 0.74], &[0.60, 0.61, 0.59, 0.62]).unwrap();
    let w = winning_rate_from_t(&[3.0, 1.0, 5.0, 2.9], 2.776);
    let u = vec![0.1; 10];
    let mut one_hot = vec![0.0; 10];
    one_hot[0] = 1.0;
    let same = emd(&u, &u).unwrap();
    let far = emd(&one_hot, &u).unwrap();
    outcome(
        (t - 16.27).abs() <= 0.01 && w == 0.75 && same.abs() <= 1e-12 && (far - 0.9).abs() <= 1e-12,
        format!("t={t:.4}, win={w}, emd(u,u)={same}, emd(e0,u)={far}"),
    )
}

// 5, 6 ----------------------------------------------------------------------

/// A client-like query context: gaussian class clusters, a local model fit on
/// a small skewed labeled set and a global model fit on a broad sample.
struct Desk {
    ds: Dataset,
    unlabeled: Vec<usize>,
    labeled: Vec<usize>,
    global: ModelParams,
    local: ModelParams,
}

fn desk_instance(seed: u64) -> Desk {
    let mut rng = common::rng(500 + seed);
    let classes = 4;
    let dim = 6;
    let means: Vec<Vec<f64>> = (0..classes).map(|_| common::gaussian(&mut rng, dim, 1.5)).collect();
    let n = 120;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // the first 40 examples are balanced (the "federation"), the rest skewed
        let c = if i < 40 { i % classes } else if rng.random_bool(0.6) { 0 } else { rng.random_range(0..classes) };
        let noise = common::gaussian(&mut rng, dim, 1.0);
        features.push(means[c].iter().zip(noise).map(|(m, e)| m + e).collect());
        labels.push(c);
    }
    let ds = common::dataset_from(features, labels, classes);
    let arch = Architecture::new(dim, vec![12], classes).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 30,
        batch_size: 8,
        lr_decay: None,
        seed,
        ..TrainConfig::default()
    };
    let broad: Vec<usize> = (0..40).collect();
    let labeled: Vec<usize> = (40..55).collect();
    let global = sgd_train(&init_params(&arch, seed).unwrap(), &ds.samples(&broad), &cfg).unwrap().params;
    let local = sgd_train(&init_params(&arch, seed + 1).unwrap(), &ds.samples(&labeled), &cfg).unwrap().params;
    Desk {
        unlabeled: (55..n).collect(),
        labeled,
        ds,
        global,
        local,
    }
}

impl Desk {
    fn ctx(&self, budget: usize, seed: u64) -> QueryContext<'_> {
        QueryContext {
            client: 0,
            dataset: &self.ds,
            unlabeled: &self.unlabeled,
            labeled: &self.labeled,
            global: &self.global,
            local: Some(&self.local),
            budget,
            seed,
        }
    }

    fn position(&self, index: usize) -> usize {
        self.unlabeled.binary_search(&index).unwrap()
    }
}

fn logo_structure() -> Outcome {
    let start = Instant::now();
    let mut per_cluster_fail = 0;
    let mut b1_mismatch = 0;
    let mut bound_fail = 0;
    let mut contexts = 0;
    for seed in 0..120u64 {
        let desk = desk_instance(seed);
        let b1 = desk.ctx(1, seed);
        if logo_query(&b1, MicroRule::Entropy).unwrap() != entropy_query(&b1, Selector::Global).unwrap() {
            b1_mismatch += 1;
        }
        let b = 2 + (seed as usize % 6);
        let ctx = desk.ctx(b, seed);
        let step = logo_macro(&ctx).unwrap();
        let picks = logo_micro(&step.clustering, &ctx, MicroRule::Entropy).unwrap();
        let clusters: BTreeSet<usize> = picks.iter().map(|&i| step.clustering.assignments[desk.position(i)]).collect();
        if clusters.len() != b || picks.len() != b {
            per_cluster_fail += 1;
        }
        let selected: Vec<Vec<f64>> = picks.iter().map(|&i| step.embeddings[desk.position(i)].clone()).collect();
        let own: f64 = picks
            .iter()
            .zip(&selected)
            .map(|(&i, e)| sq_dist(&step.clustering.centroids[step.clustering.assignments[desk.position(i)]], e))
            .sum();
        if transport_cost(&step.clustering.centroids, &selected).unwrap() > own {
            bound_fail += 1;
        }
        contexts += 1;
    }
    let t = start.elapsed();
    outcome(
        per_cluster_fail == 0 && b1_mismatch == 0 && bound_fail == 0 && contexts >= 100,
        format!(
            "{contexts} contexts: {per_cluster_fail} cluster-coverage failures, {b1_mismatch} B=1 mismatches, {bound_fail} bound violations, {:.2}s",
            t.as_secs_f64()
        ),
    )
}

fn logo_vs_entropy_transport() -> Outcome {
    let start = Instant::now();
    let total = 200u64;
    let mut wins = 0;
    for seed in 0..total {
        let desk = desk_instance(10_000 + seed);
        let b = 2 + (seed as usize % 7);
        let ctx = desk.ctx(b, seed);
        let step = logo_macro(&ctx).unwrap();
        let logo = logo_micro(&step.clustering, &ctx, MicroRule::Entropy).unwrap();
        let entropy = entropy_query(&ctx, Selector::Global).unwrap();
        let cost = |picks: &[usize]| {
            let sel: Vec<Vec<f64>> = picks.iter().map(|&i| step.embeddings[desk.position(i)].clone()).collect();
            transport_cost(&step.clustering.centroids, &sel).unwrap()
        };
        if cost(&logo) <= cost(&entropy) {
            wins += 1;
        }
    }
    let t = start.elapsed();
    let rate = wins as f64 / total as f64;
    outcome(
        rate >= 0.9 && within(t, 120),
        format!("M(LoGo) <= M(entropy) in {wins}/{total} ({:.1}%), {:.2}s", 100.0 * rate, t.as_secs_f64()),
    )
}

// 7, 8, 9 -------------------------------------------------------------------

const GRID_SEEDS: std::ops::Range<u64> = 0..8;

fn grid_config(alpha: Concentration, rho: f64, selector: Selector) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        query: single_model_spec(fal_core::strategies::StrategyKind::Entropy, selector),
        seeds: GRID_SEEDS.collect(),
        save_checkpoints: false,
        ..ExperimentConfig::default()
    };
    c.partition.alpha = alpha;
    c.partition.rho = rho;
    c
}

struct Pair {
    global: ExperimentResult,
    local: ExperimentResult,
}

fn run_pair(alpha: Concentration, rho: f64) -> Pair {
    Pair {
        global: run_experiment(&grid_config(alpha, rho, Selector::Global)).unwrap(),
        local: run_experiment(&grid_config(alpha, rho, Selector::Local)).unwrap(),
    }
}

/// Mean over seeds and AL rounds 2–4.
fn mean_over_rounds(r: &ExperimentResult, f: impl Fn(&RoundRecord) -> f64) -> f64 {
    let values: Vec<f64> = r
        .runs
        .iter()
        .flat_map(|run| run.rounds.iter().filter(|x| (2..=4).contains(&x.al_round)).map(&f))
        .collect();
    values.iter().sum::<f64>() / values.len() as f64
}

fn all_succeeded(p: &Pair) -> bool {
    p.global.runs.iter().chain(&p.local.runs).all(SeedRun::succeeded)
}

fn winning_gap(p: &Pair) -> (f64, f64, f64) {
    let g = compare(&p.global, &p.local).unwrap().winning_rate;
    let l = compare(&p.local, &p.global).unwrap().winning_rate;
    (g - l, g, l)
}

// 10 ------------------------------------------------------------------------

/// Rebuilds every round's label state from the query log and the seed's
/// split, checking disjointness, conservation and the per-round budget.
fn replay_violations(r: &ExperimentResult, train: &Dataset) -> usize {
    let mut bad = 0;
    for run in &r.runs {
        let setup = prepare_seed(&r.config, train, run.seed).unwrap();
        let mut labeled: Vec<Vec<usize>> = vec![Vec::new(); setup.split.num_clients()];
        for (round, picks) in run.queries.iter().enumerate() {
            for (k, p) in picks.iter().enumerate() {
                labeled[k].extend(p);
            }
            let mut seen = BTreeSet::new();
            for (k, l) in labeled.iter().enumerate() {
                let own: BTreeSet<usize> = setup.split.clients[k].iter().copied().collect();
                if l.len() != (round + 1) * setup.budget || l.iter().any(|i| !own.contains(i) || !seen.insert(*i)) {
                    bad += 1;
                }
            }
        }
        let Some(state) = run.final_state.as_ref() else {
            bad += 1;
            continue;
        };
        for (k, pool) in state.clients.iter().enumerate() {
            let mut all: Vec<usize> = pool.labeled.iter().chain(&pool.unlabeled).copied().collect();
            all.sort_unstable();
            let mut own = setup.split.clients[k].clone();
            own.sort_unstable();
            if pool.labeled != labeled[k] || all != own {
                bad += 1;
            }
        }
    }
    bad
}

fn small_config(strategy: fal_core::strategies::StrategyKind) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            num_classes: 3,
            per_class: 20,
            test_per_class: 20,
            dim: 4,
            separation: 2.5,
            seed: 1,
        },
        query: single_model_spec(strategy, Selector::Global),
        budget: Budget::Count(5),
        rounds: 4,
        seeds: vec![0, 1, 2, 3],
        ..ExperimentConfig::default()
    };
    c.partition.num_clients = 3;
    c.partition.alpha = Concentration::Infinite;
    c.model.hidden = vec![8];
    c.federation.fl_rounds = 5;
    c
}

fn tree_bytes(dir: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_suite(grid: &[&ExperimentResult]) -> Outcome {
    use fal_core::strategies::StrategyKind;
    let start = Instant::now();
    let mut notes = Vec::new();

    // pool exhaustion: 4 rounds of 5 labels use up every 20-example client pool
    let random = run_experiment(&small_config(StrategyKind::Random)).unwrap();
    let entropy = run_experiment(&small_config(StrategyKind::Entropy)).unwrap();
    let exhausted = random.runs.iter().zip(&entropy.runs).all(|(a, b)| {
        match (a.final_state.as_ref(), b.final_state.as_ref()) {
            (Some(sa), Some(sb)) => sa.clients.iter().zip(&sb.clients).all(|(x, y)| {
                x.unlabeled.is_empty() && common::sorted(x.labeled.clone()) == common::sorted(y.labeled.clone())
            }),
            _ => false,
        }
    });
    notes.push(format!("exhaustion {}", if exhausted { "ok" } else { "FAILED" }));

    // bit-identical rerun of a full grid configuration
    let rerun = run_experiment(&grid[0].config).unwrap();
    let identical = rerun == *grid[0] && experiment_artifacts(&rerun).unwrap() == experiment_artifacts(grid[0]).unwrap();
    notes.push(format!("rerun {}", if identical { "ok" } else { "FAILED" }));

    // serial and parallel grids written to the same directory in turn
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("grid");
    let configs = |strategies: &[StrategyKind]| -> Vec<ExperimentConfig> {
        strategies
            .iter()
            .map(|&s| {
                let mut c = small_config(s);
                c.output_dir = Some(root.join(s.to_string()));
                c
            })
            .collect()
    };
    let kinds = [StrategyKind::Entropy, StrategyKind::Logo, StrategyKind::Badge];
    run_grid(&configs(&kinds), false, true).unwrap();
    let serial = tree_bytes(&root);
    std::fs::remove_dir_all(&root).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    pool.install(|| run_grid(&configs(&kinds), true, true).unwrap());
    let parallel = tree_bytes(&root);
    let same_bytes = !serial.is_empty() && serial == parallel;
    notes.push(format!("grid bytes {} ({} files)", if same_bytes { "ok" } else { "FAILED" }, serial.len()));

    // label-state replay for every run of this suite and of criteria 7-9
    let mut checked: Vec<&ExperimentResult> = grid.to_vec();
    checked.push(&random);
    checked.push(&entropy);
    checked.push(&rerun);
    let mut violations = 0;
    let mut runs = 0;
    for r in checked {
        let (train, _) = r.config.dataset.load().unwrap();
        violations += replay_violations(r, &train);
        runs += r.runs.len();
    }
    notes.push(format!("{violations} label-state violations over {runs} seed runs"));

    let t = start.elapsed();
    outcome(
        exhausted && identical && same_bytes && violations == 0,
        format!("{}, {:.1}s", notes.join(", "), t.as_secs_f64()),
    )
}

fn report(id: usize, name: &str, o: &Outcome, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() {
    let mut failures = 0;
    report(1, "gradient correctness", &gradient_check(), &mut failures);
    report(2, "FedAvg equivalence", &fedavg_equivalence(), &mut failures);
    report(3, "k-means oracle", &kmeans_oracle(), &mut failures);
    report(4, "metric oracles", &metric_oracles(), &mut failures);
    report(5, "LoGo structure", &logo_structure(), &mut failures);
    report(6, "LoGo transport cost vs entropy", &logo_vs_entropy_transport(), &mut failures);

    let grid_start = Instant::now();
    let skewed = run_pair(Concentration::Finite(0.1), 1.0);
    let skewed_imbalanced = run_pair(Concentration::Finite(0.1), 10.0);
    let mut grid_time = grid_start.elapsed();

    let g = mean_over_rounds(&skewed.global, |r| r.local_emd);
    let l = mean_over_rounds(&skewed.local, |r| r.local_emd);
    report(
        7,
        "local EMD ordering (alpha=0.1, rho=1)",
        &outcome(
            all_succeeded(&skewed) && l < g && within(grid_time, 600),
            format!("local-only {l:.4} vs global {g:.4}, {:.1}s", grid_time.as_secs_f64()),
        ),
        &mut failures,
    );

    let g = mean_over_rounds(&skewed_imbalanced.global, |r| r.global_emd);
    let l = mean_over_rounds(&skewed_imbalanced.local, |r| r.global_emd);
    report(
        8,
        "global EMD ordering (alpha=0.1, rho=10)",
        &outcome(
            all_succeeded(&skewed_imbalanced) && g < l,
            format!("global {g:.4} vs local-only {l:.4}"),
        ),
        &mut failures,
    );

    let again = Instant::now();
    let balanced_imbalanced = run_pair(Concentration::Infinite, 10.0);
    grid_time += again.elapsed();
    let (gap_a, ga, la) = winning_gap(&skewed);
    let (gap_b, gb, lb) = winning_gap(&balanced_imbalanced);
    report(
        9,
        "winning-rate sign flip",
        &outcome(
            all_succeeded(&balanced_imbalanced) && gap_a <= 0.0 && gap_b >= 0.0 && within(grid_time, 1800),
            format!(
                "gap at (0.1, 1) = {gap_a:+.2} (G {ga:.2}, L {la:.2}), gap at (inf, 10) = {gap_b:+.2} (G {gb:.2}, L {lb:.2}), threshold {:.4}, {:.1}s",
                critical_value(GRID_SEEDS.count()),
                grid_time.as_secs_f64()
            ),
        ),
        &mut failures,
    );

    let grid = [
        &skewed.global,
        &skewed.local,
        &skewed_imbalanced.global,
        &skewed_imbalanced.local,
        &balanced_imbalanced.global,
        &balanced_imbalanced.local,
    ];
    report(10, "degeneracy and determinism", &determinism_suite(&grid), &mut failures);

    println!("{} of 10 criteria passed", 10 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
